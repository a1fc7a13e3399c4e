//! Per-dataset NMSE tables, ECDF curves and detection rates.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::Result;
use crate::geometry::{ecdf, nmse_subset, LandmarkSet, LandmarkSubset, NmseReport};

/// Standard table rows and the dataset names feeding each.
pub const TABLE_ROWS: [(&str, &str); 5] =
    [("Helen", "Helen"), ("LFPW", "LFPW"), ("300-W In", "300-W Indoor"), ("300-W Out", "300-W Outdoor"), ("IBUG", "IBUG")];

pub const TOTAL_ROW: &str = "Total";

/// Table row of a dataset name.
pub fn row_label(dataset: &str) -> String {
    TABLE_ROWS.iter().find(|(_, d)| *d == dataset).map(|(r, _)| r.to_string()).unwrap_or_else(|| dataset.to_string())
}

/// Ground truth and prediction of one evaluation sample; `pred` is `None`
/// when the detector produced no usable landmarks.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub id: String,
    pub dataset: String,
    pub occluded: bool,
    pub truth: LandmarkSet,
    pub pred: Option<LandmarkSet>,
}

/// All reports of one model.
#[derive(Clone, Debug)]
pub struct ModelEval {
    pub name: String,
    /// `(row, all landmarks, eye anchors)`, table order, `Total` last.
    pub rows: Vec<(String, NmseReport, NmseReport)>,
    /// `(with occlusion, without occlusion)` over all landmarks.
    pub occlusion: Option<(NmseReport, NmseReport)>,
}

impl ModelEval {
    pub fn total(&self) -> &NmseReport {
        &self.rows.last().expect("total row").1
    }
}

fn report(name: &str, subset: LandmarkSubset, samples: &[&EvalSample]) -> Result<NmseReport> {
    let mut per = Vec::new();
    for s in samples {
        if let Some(p) = &s.pred {
            per.push((s.id.clone(), nmse_subset(p, &s.truth, &subset.indices(s.truth.scheme()))?));
        }
    }
    Ok(NmseReport::new(name, subset, per, samples.len()))
}

/// Row reports in table order: standard rows present in the data, then
/// any other datasets by name, then the total over every sample.
pub fn evaluate(name: &str, samples: &[EvalSample], with_occlusion: bool) -> Result<ModelEval> {
    let mut groups: BTreeMap<String, Vec<&EvalSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(row_label(&s.dataset)).or_default().push(s);
    }
    let mut order: Vec<String> = TABLE_ROWS.iter().map(|(r, _)| r.to_string()).filter(|r| groups.contains_key(r)).collect();
    order.extend(groups.keys().filter(|k| !TABLE_ROWS.iter().any(|(r, _)| r == k)).cloned());
    let mut rows = Vec::new();
    for r in order {
        let g = &groups[&r];
        rows.push((r.clone(), report(&r, LandmarkSubset::All, g)?, report(&r, LandmarkSubset::EyeAnchors, g)?));
    }
    let all: Vec<&EvalSample> = samples.iter().collect();
    rows.push((TOTAL_ROW.into(), report(TOTAL_ROW, LandmarkSubset::All, &all)?, report(TOTAL_ROW, LandmarkSubset::EyeAnchors, &all)?));
    let occlusion = if with_occlusion {
        let (occ, clear): (Vec<&EvalSample>, Vec<&EvalSample>) = samples.iter().partition(|s| s.occluded);
        Some((report("with occlusion", LandmarkSubset::All, &occ)?, report("without occlusion", LandmarkSubset::All, &clear)?))
    } else {
        None
    };
    Ok(ModelEval { name: name.into(), rows, occlusion })
}

fn cell(r: &NmseReport) -> String {
    if r.detected == 0 {
        "-".into()
    } else {
        format!("{:.4}", r.mean)
    }
}

fn grid(title: &str, models: &[ModelEval], rows: &[String], pick: impl Fn(&ModelEval, &str) -> Option<String>) -> String {
    let mut s = format!("{title}\n");
    let w = rows.iter().map(String::len).max().unwrap_or(0).max(7);
    let _ = write!(s, "{:<w$}", "dataset");
    for m in models {
        let _ = write!(s, "  {:>12}", m.name);
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{r:<w$}");
        for m in models {
            let _ = write!(s, "  {:>12}", pick(m, r).unwrap_or_else(|| "-".into()));
        }
        s.push('\n');
    }
    s
}

fn row_names(models: &[ModelEval]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for m in models {
        for (r, _, _) in &m.rows {
            if !names.contains(r) {
                names.push(r.clone());
            }
        }
    }
    // Keep Total last even when models cover different datasets.
    names.retain(|n| n != TOTAL_ROW);
    names.push(TOTAL_ROW.into());
    names
}

/// NMSE tables (datasets as rows, models as columns), detection rates
/// and, when present, the occlusion split.
pub fn format_tables(models: &[ModelEval]) -> String {
    let rows = row_names(models);
    let find = |m: &ModelEval, r: &str| m.rows.iter().find(|(n, _, _)| n == r).cloned();
    let mut s = grid("Mean NMSE, all landmarks", models, &rows, |m, r| find(m, r).map(|x| cell(&x.1)));
    s.push('\n');
    s += &grid("Mean NMSE, eye anchors", models, &rows, |m, r| find(m, r).map(|x| cell(&x.2)));
    s.push('\n');
    s += &grid("Detection rate", models, &rows, |m, r| find(m, r).map(|x| format!("{:.4}", x.1.detection_rate())));
    if models.iter().any(|m| m.occlusion.is_some()) {
        s.push('\n');
        let occ = ["with occlusion".to_string(), "without occlusion".to_string()];
        s += &grid("Mean NMSE by occlusion", models, &occ, |m, r| {
            m.occlusion.as_ref().map(|(a, b)| cell(if r == occ[0] { a } else { b }))
        });
    }
    s
}

/// File-name-safe form of a row or model name.
pub fn slug(s: &str) -> String {
    let mut out: String = s.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    while out.contains("__") {
        out = out.replace("__", "_");
    }
    out.trim_matches('_').to_string()
}

/// ECDF staircase plot of several curves.
pub fn ecdf_svg(title: &str, curves: &[(String, Vec<(f64, f64)>)]) -> String {
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let (w, h, m) = (480.0, 320.0, 40.0);
    let xmax = curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.0)).fold(0.0f64, f64::max).max(1e-9);
    let px = |x: f64| m + x / xmax * (w - 2.0 * m);
    let py = |y: f64| h - m - y * (h - 2.0 * m);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    let _ = writeln!(s, "<text x=\"{m}\" y=\"20\" font-size=\"14\">{title}</text>");
    let _ = writeln!(s, "<path d=\"M{m},{} L{},{} M{m},{} L{m},{m}\" stroke=\"black\" fill=\"none\"/>", h - m, w - m, h - m, h - m);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"11\">NMSE {xmax:.3}</text>", w - m - 60.0, h - m + 16.0);
    for (k, (name, c)) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = format!("M{:.2},{:.2}", px(0.0), py(0.0));
        let mut prev = 0.0;
        for &(x, y) in c {
            let _ = write!(d, " L{:.2},{:.2} L{:.2},{:.2}", px(x), py(prev), px(x), py(y));
            prev = y;
        }
        let _ = writeln!(s, "<path d=\"{d}\" stroke=\"{color}\" fill=\"none\"/>");
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>", w - m - 100.0, m + 14.0 * (k as f64 + 1.0));
    }
    s.push_str("</svg>\n");
    s
}

/// `(file name, contents)` of every ECDF CSV of a model, plus an SVG
/// when requested.
pub fn ecdf_files(model: &ModelEval, svg: bool) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    let mut curves = Vec::new();
    for (row, all, _) in &model.rows {
        if all.detected == 0 {
            continue;
        }
        let curve = ecdf(&all.values())?;
        files.push((format!("ecdf_{}_{}.csv", slug(&model.name), slug(row)), crate::geometry::ecdf_csv(&curve)));
        curves.push((row.clone(), curve));
    }
    if svg && !curves.is_empty() {
        files.push((format!("ecdf_{}.svg", slug(&model.name)), ecdf_svg(&model.name, &curves)));
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point, Scheme};

    fn face(dx: f64) -> LandmarkSet {
        let pts = (0..10).map(|i| Point::new(i as f64 * 3.0 + dx, (i % 3) as f64 * 4.0)).collect();
        LandmarkSet::new(Scheme::Toy10, pts).unwrap()
    }

    fn sample(id: &str, dataset: &str, dx: Option<f64>) -> EvalSample {
        EvalSample { id: id.into(), dataset: dataset.into(), occluded: id.ends_with('o'), truth: face(0.0), pred: dx.map(face) }
    }

    #[test]
    fn passthrough_is_perfect() {
        let s = vec![sample("a", "Helen", Some(0.0)), sample("b", "IBUG", Some(0.0))];
        let m = evaluate("gt", &s, false).unwrap();
        for (_, all, eye) in &m.rows {
            assert_eq!(all.mean, 0.0);
            assert_eq!(eye.mean, 0.0);
            assert_eq!(all.detection_rate(), 1.0);
        }
    }

    #[test]
    fn rows_follow_table_order_and_total_is_union_mean() {
        let s = vec![
            sample("a", "IBUG", Some(1.0)),
            sample("b", "Helen", Some(2.0)),
            sample("c", "300-W Indoor", Some(0.5)),
            sample("d", "synthetic", None),
            sample("eo", "Helen", Some(0.0)),
        ];
        let m = evaluate("m", &s, true).unwrap();
        let names: Vec<&str> = m.rows.iter().map(|r| r.0.as_str()).collect();
        assert_eq!(names, ["Helen", "300-W In", "IBUG", "synthetic", "Total"]);
        let vals: Vec<f64> = m.rows[..3].iter().flat_map(|r| r.1.values()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((m.total().mean - mean).abs() < 1e-15);
        assert_eq!(m.total().detection_rate(), 0.8);
        let (occ, clear) = m.occlusion.as_ref().unwrap();
        assert_eq!((occ.total, clear.total), (1, 4));
        let t = format_tables(std::slice::from_ref(&m));
        assert!(t.contains("300-W In") && t.contains("by occlusion"));
        let files = ecdf_files(&m, true).unwrap();
        assert!(files.iter().any(|(n, _)| n == "ecdf_m_total.csv"));
        assert!(files.iter().any(|(n, _)| n.ends_with(".svg")));
        let total_csv = &files.iter().find(|(n, _)| n == "ecdf_m_total.csv").unwrap().1;
        assert!(total_csv.trim_end().ends_with(",1"));
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("300-W In"), "300_w_in");
        assert_eq!(slug("hybrid+disc"), "hybrid_disc");
    }
}
