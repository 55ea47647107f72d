//! Pose accuracy metrics and report rendering.
//!
//! ADD averages, over the model points, the distance between each point under
//! the predicted pose and the same point under the ground-truth pose. ADD-S
//! replaces the same-point distance by the distance to the closest
//! ground-truth-transformed point; the outer average runs over the
//! prediction-transformed points. Since the inner minimum includes the same
//! point, ADD-S never exceeds ADD.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_geodesic_deg, translation_error_mm, Pose};
use crate::model::ObjectModel;
use crate::spatial::NearestNeighbors;

/// Row labels in report order.
pub const ROW_LABELS: [&str; 4] = ["ADD Distance (mm)", "ADD-S Distance (mm)", "Rotation Error (°)", "Translation Error (mm)"];

pub const CSV_HEADER: &str = "method,scene_id,add_mm,adds_mm,rot_err_deg,trans_err_mm";

/// Scene id used for injected reference values.
pub const REFERENCE_SCENE_ID: &str = "[reference]";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{origin}:{line}: {reason}")]
    Csv { origin: String, line: usize, reason: String },
    #[error("{origin}: no records")]
    Empty { origin: String },
    #[error("no reports to render")]
    NothingToRender,
}

pub fn add_metric(model: &ObjectModel, pred: &Pose, gt: &Pose) -> f64 {
    let sum: f64 = model.points().iter().map(|x| (pred.apply(x) - gt.apply(x)).norm()).sum();
    sum / model.len() as f64
}

pub fn adds_metric(model: &ObjectModel, pred: &Pose, gt: &Pose) -> f64 {
    let gt_points: Vec<Vector3<f64>> = model.points().iter().map(|x| gt.apply(x)).collect();
    let index = NearestNeighbors::new(&gt_points);
    let sum: f64 = model
        .points()
        .iter()
        .map(|x| {
            let p = pred.apply(x);
            index.nearest(&p).map(|n| n.dist_sq.sqrt()).unwrap_or(0.0)
        })
        .sum();
    sum / model.len() as f64
}

/// Per-scene metric tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_id: String,
    pub add_mm: f64,
    pub adds_mm: f64,
    pub rot_err_deg: f64,
    pub trans_err_mm: f64,
}

impl EvalRecord {
    pub fn values(&self) -> [f64; 4] {
        [self.add_mm, self.adds_mm, self.rot_err_deg, self.trans_err_mm]
    }
}

/// All four metrics. Both ADD and ADD-S are always reported; the model's
/// symmetry flag only tells consumers which column is authoritative.
pub fn evaluate_scene(scene_id: impl Into<String>, model: &ObjectModel, pred: &Pose, gt: &Pose) -> EvalRecord {
    EvalRecord {
        scene_id: scene_id.into(),
        add_mm: add_metric(model, pred, gt),
        adds_mm: adds_metric(model, pred, gt),
        rot_err_deg: rotation_geodesic_deg(&pred.rotation, &gt.rotation),
        trans_err_mm: translation_error_mm(&pred.translation, &gt.translation),
    }
}

/// Evaluates many scenes in parallel; output order follows input order.
pub fn evaluate_scenes(model: &ObjectModel, cases: &[(String, Pose, Pose)]) -> Vec<EvalRecord> {
    cases.par_iter().map(|(id, pred, gt)| evaluate_scene(id.clone(), model, pred, gt)).collect()
}

/// Records of one method plus the reference marker.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub method_name: String,
    pub records: Vec<EvalRecord>,
    /// Values were injected from an external table, not measured.
    pub reference: bool,
}

impl Report {
    pub fn new(method_name: impl Into<String>, records: Vec<EvalRecord>) -> Self {
        let reference = !records.is_empty() && records.iter().all(|r| r.scene_id == REFERENCE_SCENE_ID);
        Report { method_name: method_name.into(), records, reference }
    }

    /// Unweighted mean of each metric over the records, summed in record order.
    pub fn aggregate(&self) -> [f64; 4] {
        let n = self.records.len().max(1) as f64;
        let mut acc = [0.0; 4];
        for r in &self.records {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        acc.map(|a| a / n)
    }
}

fn pad_left(s: &str, width: usize) -> String {
    let len = s.chars().count();
    format!("{}{}", " ".repeat(width.saturating_sub(len)), s)
}

fn pad_right(s: &str, width: usize) -> String {
    let len = s.chars().count();
    format!("{}{}", s, " ".repeat(width.saturating_sub(len)))
}

/// Fixed-width text table: one row per metric, one column per method,
/// values to two decimals.
pub fn render_table(reports: &[Report]) -> Result<String, ReportError> {
    if reports.is_empty() {
        return Err(ReportError::NothingToRender);
    }
    let label_width = ROW_LABELS.iter().map(|l| l.chars().count()).max().unwrap_or(0).max("Metric".len());
    let cells: Vec<[String; 4]> = reports.iter().map(|r| r.aggregate().map(|v| format!("{v:.2}"))).collect();
    let widths: Vec<usize> =
        reports.iter().zip(&cells).map(|(r, c)| c.iter().map(String::len).max().unwrap_or(0).max(r.method_name.chars().count())).collect();

    let mut out = String::new();
    let mut line = pad_right("Metric", label_width);
    for (r, w) in reports.iter().zip(&widths) {
        line.push_str("  ");
        line.push_str(&pad_left(&r.method_name, *w));
    }
    out.push_str(line.trim_end());
    out.push('\n');
    let mut rule = "-".repeat(label_width);
    for w in &widths {
        rule.push_str("  ");
        rule.push_str(&"-".repeat(*w));
    }
    out.push_str(&rule);
    out.push('\n');
    for (row, label) in ROW_LABELS.iter().enumerate() {
        let mut line = pad_right(label, label_width);
        for (c, w) in cells.iter().zip(&widths) {
            line.push_str("  ");
            line.push_str(&pad_left(&c[row], *w));
        }
        out.push_str(&line);
        out.push('\n');
    }
    let references: Vec<&str> = reports.iter().filter(|r| r.reference).map(|r| r.method_name.as_str()).collect();
    if !references.is_empty() {
        let _ = writeln!(out, "\n{REFERENCE_SCENE_ID} injected reference values, not measured: {}", references.join(", "));
    }
    let measured: Vec<String> = reports.iter().filter(|r| !r.reference).map(|r| format!("{}={}", r.method_name, r.records.len())).collect();
    if !measured.is_empty() {
        let _ = writeln!(out, "\nscenes: {}", measured.join(", "));
    }
    Ok(out)
}

/// CSV with [`CSV_HEADER`]; floats in round-trip formatting.
pub fn render_csv(reports: &[Report]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        for rec in &r.records {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{:?},{:?}",
                csv_field(&r.method_name),
                csv_field(&rec.scene_id),
                rec.add_mm,
                rec.adds_mm,
                rec.rot_err_deg,
                rec.trans_err_mm
            );
        }
    }
    out
}

/// Text table and CSV together.
pub fn render_report(reports: &[Report]) -> Result<(String, String), ReportError> {
    Ok((render_table(reports)?, render_csv(reports)))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Result<Vec<String>, String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', false) if cur.is_empty() => quoted = true,
            ('"', true) => {
                if chars.peek() == Some(&'"') {
                    cur.push('"');
                    chars.next();
                } else {
                    quoted = false;
                }
            }
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    if quoted {
        return Err("unterminated quoted field".into());
    }
    fields.push(cur);
    Ok(fields)
}

/// Parses a metrics CSV into per-method reports, in first-appearance order.
/// `origin` names the source in error messages.
pub fn parse_csv(text: &str, origin: &str) -> Result<Vec<Report>, ReportError> {
    let err = |line: usize, reason: String| ReportError::Csv { origin: origin.to_string(), line, reason };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == CSV_HEADER => {}
        Some((_, h)) => return Err(err(1, format!("expected header '{CSV_HEADER}', found '{h}'"))),
        None => return Err(ReportError::Empty { origin: origin.to_string() }),
    }
    let mut reports: Vec<(String, Vec<EvalRecord>)> = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields = split_csv_line(line).map_err(|e| err(n, e))?;
        if fields.len() != 6 {
            return Err(err(n, format!("expected 6 fields, found {}", fields.len())));
        }
        let mut vals = [0.0; 4];
        for (k, v) in vals.iter_mut().enumerate() {
            let f = &fields[k + 2];
            *v = f.trim().parse::<f64>().map_err(|_| err(n, format!("field {} is not a number: '{f}'", k + 3)))?;
            if !v.is_finite() || *v < 0.0 {
                return Err(err(n, format!("field {} must be finite and non-negative", k + 3)));
            }
        }
        let rec =
            EvalRecord { scene_id: fields[1].clone(), add_mm: vals[0], adds_mm: vals[1], rot_err_deg: vals[2], trans_err_mm: vals[3] };
        match reports.iter_mut().find(|(m, _)| *m == fields[0]) {
            Some((_, recs)) => recs.push(rec),
            None => reports.push((fields[0].clone(), vec![rec])),
        }
    }
    if reports.is_empty() {
        return Err(ReportError::Empty { origin: origin.to_string() });
    }
    Ok(reports.into_iter().map(|(m, r)| Report::new(m, r)).collect())
}

/// Merges reports by method name, keeping first-appearance order.
pub fn merge_reports(groups: impl IntoIterator<Item = Report>) -> Vec<Report> {
    let mut out: Vec<Report> = Vec::new();
    for r in groups {
        match out.iter_mut().find(|o| o.method_name == r.method_name) {
            Some(o) => {
                o.records.extend(r.records);
                o.reference = o.reference && r.reference;
            }
            None => out.push(r),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{quat_to_rotmat, Quaternion, Rotation};
    use proptest::prelude::*;

    fn unit_square() -> ObjectModel {
        let pts =
            vec![Vector3::new(1.0, 1.0, 0.0), Vector3::new(-1.0, 1.0, 0.0), Vector3::new(-1.0, -1.0, 0.0), Vector3::new(1.0, -1.0, 0.0)];
        ObjectModel::new("square", pts, true).unwrap()
    }

    // Independent oracles: plain loops over coordinates.
    fn oracle_add(pts: &[Vector3<f64>], pred: &Pose, gt: &Pose) -> f64 {
        let mut s = 0.0;
        for x in pts {
            let a = pred.apply(x);
            let b = gt.apply(x);
            s += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        }
        s / pts.len() as f64
    }

    fn oracle_adds(pts: &[Vector3<f64>], pred: &Pose, gt: &Pose) -> f64 {
        let mut s = 0.0;
        for x in pts {
            let a = pred.apply(x);
            let mut best = f64::INFINITY;
            for y in pts {
                let b = gt.apply(y);
                best = best.min(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt());
            }
            s += best;
        }
        s / pts.len() as f64
    }

    #[test]
    fn identical_poses_give_zero() {
        let m = unit_square();
        let p = Pose::new(Rotation::rot_z_deg(17.0), Vector3::new(1.0, 2.0, 300.0));
        assert_eq!(add_metric(&m, &p, &p), 0.0);
        assert_eq!(adds_metric(&m, &p, &p), 0.0);
        let rec = evaluate_scene("s", &m, &p, &p);
        assert_eq!(rec.values(), [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pure_translation_offset() {
        let m = unit_square();
        let gt = Pose::identity();
        let pred = Pose::from_translation(Vector3::new(3.0, 0.0, 0.0));
        assert_eq!(add_metric(&m, &pred, &gt), 3.0);
    }

    #[test]
    fn square_quarter_turn() {
        let m = unit_square();
        let gt = Pose::identity();
        let pred = Pose::from_rotation(Rotation::rot_z_deg(90.0));
        // Hand evaluation: (1,1) → (−1,1) etc., each vertex moves to its neighbour 2 mm away.
        let add = add_metric(&m, &pred, &gt);
        assert!((add - 2.0).abs() < 1e-12);
        assert!((add - oracle_add(m.points(), &pred, &gt)).abs() < 1e-12);
        let adds = adds_metric(&m, &pred, &gt);
        assert!(adds < 1e-12);
        assert!((adds - oracle_adds(m.points(), &pred, &gt)).abs() < 1e-12);
    }

    #[test]
    fn depth_offset_record() {
        let pts: Vec<_> = (0..40)
            .map(|i| {
                let f = i as f64;
                Vector3::new(30.0 * (f * 0.7).sin(), 80.0 * (f * 0.3).cos() + f, 10.0 * (f * 1.3).sin())
            })
            .collect();
        let m = ObjectModel::new("driller-ish", pts, false).unwrap();
        let gt = Pose::new(Rotation::rot_z_deg(40.0), Vector3::new(10.0, -5.0, 800.0));
        let pred = Pose::new(gt.rotation, gt.translation + Vector3::new(0.0, 0.0, 20.0));
        let rec = evaluate_scene("s", &m, &pred, &gt);
        assert!((rec.add_mm - 20.0).abs() < 1e-12);
        assert!(rec.adds_mm <= 20.0 + 1e-12);
        assert!((rec.adds_mm - oracle_adds(m.points(), &pred, &gt)).abs() < 1e-12);
        assert_eq!(rec.rot_err_deg, 0.0);
        assert!((rec.trans_err_mm - 20.0).abs() < 1e-12);
    }

    fn reference_values() -> Vec<Report> {
        let rec = |v: [f64; 4]| EvalRecord {
            scene_id: REFERENCE_SCENE_ID.into(),
            add_mm: v[0],
            adds_mm: v[1],
            rot_err_deg: v[2],
            trans_err_mm: v[3],
        };
        vec![
            Report::new("CLIP Based", vec![rec([32.17, 32.17, 11.68, 20.00])]),
            Report::new("DINOv2 Based", vec![rec([28.45, 29.12, 9.34, 17.52])]),
        ]
    }

    #[test]
    fn reference_values_rendering() {
        let text = render_table(&reference_values()).unwrap();
        let expected = "\
Metric                  CLIP Based  DINOv2 Based
----------------------  ----------  ------------
ADD Distance (mm)            32.17         28.45
ADD-S Distance (mm)          32.17         29.12
Rotation Error (°)           11.68          9.34
Translation Error (mm)       20.00         17.52

[reference] injected reference values, not measured: CLIP Based, DINOv2 Based
";
        assert_eq!(text, expected);
    }

    #[test]
    fn zero_scene_and_mean() {
        let zero = EvalRecord { scene_id: "a".into(), add_mm: 0.0, adds_mm: 0.0, rot_err_deg: 0.0, trans_err_mm: 0.0 };
        let text = render_table(&[Report::new("m", vec![zero.clone()])]).unwrap();
        assert_eq!(text.matches("0.00").count(), 4);
        let a = EvalRecord { add_mm: 10.0, ..zero.clone() };
        let b = EvalRecord { add_mm: 20.0, scene_id: "b".into(), ..zero };
        let r = Report::new("m", vec![a, b]);
        assert_eq!(r.aggregate()[0], 15.0);
        assert!(render_table(&[r]).unwrap().contains("15.00"));
        assert!(matches!(render_table(&[]), Err(ReportError::NothingToRender)));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let csv = render_csv(&reference_values());
        assert!(csv.starts_with(CSV_HEADER));
        let back = parse_csv(&csv, "t.csv").unwrap();
        assert_eq!(back, reference_values());
        assert!(matches!(parse_csv("", "e.csv"), Err(ReportError::Empty { .. })));
        assert!(matches!(parse_csv(&format!("{CSV_HEADER}\n"), "e.csv"), Err(ReportError::Empty { .. })));
        let bad = format!("{CSV_HEADER}\nm,s,1,2,x,4\n");
        match parse_csv(&bad, "bad.csv") {
            Err(ReportError::Csv { origin, line, .. }) => {
                assert_eq!(origin, "bad.csv");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        let quoted = format!("{CSV_HEADER}\n\"a,b\",s,1,1,1,1\n");
        assert_eq!(parse_csv(&quoted, "q").unwrap()[0].method_name, "a,b");
    }

    #[test]
    fn merge_keeps_order() {
        let mut t = reference_values();
        t.push(Report::new(
            "CLIP Based",
            vec![EvalRecord { scene_id: "x".into(), add_mm: 1.0, adds_mm: 1.0, rot_err_deg: 1.0, trans_err_mm: 1.0 }],
        ));
        let merged = merge_reports(t);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].records.len(), 2);
        assert!(!merged[0].reference);
    }

    fn random_case() -> impl Strategy<Value = (Vec<Vector3<f64>>, Pose, Pose)> {
        let pose = (prop::array::uniform4(-1.0..1.0f64), prop::array::uniform3(-200.0..200.0f64)).prop_filter_map(
            "nonzero quaternion",
            |(q, t)| {
                let q = Quaternion::new(q[0], q[1], q[2], q[3]).ok()?;
                Some(Pose::new(quat_to_rotmat(&q).ok()?, Vector3::from(t)))
            },
        );
        (prop::collection::vec(prop::array::uniform3(-100.0..100.0f64), 1..40), pose.clone(), pose)
            .prop_map(|(pts, a, b)| (pts.into_iter().map(Vector3::from).collect(), a, b))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn adds_never_exceeds_add((pts, pred, gt) in random_case()) {
            let m = ObjectModel::new("r", pts, false).unwrap();
            let add = add_metric(&m, &pred, &gt);
            let adds = adds_metric(&m, &pred, &gt);
            prop_assert!(adds <= add + 1e-12);
            prop_assert!((add - oracle_add(m.points(), &pred, &gt)).abs() <= 1e-9);
            prop_assert!((adds - oracle_adds(m.points(), &pred, &gt)).abs() <= 1e-9);
        }

        #[test]
        fn add_under_translation_equals_offset_norm((pts, _p, gt) in random_case(), d in prop::array::uniform3(-50.0..50.0f64)) {
            let m = ObjectModel::new("r", pts, false).unwrap();
            let delta = Vector3::from(d);
            let pred = Pose::new(gt.rotation, gt.translation + delta);
            prop_assert!((add_metric(&m, &pred, &gt) - delta.norm()).abs() <= 1e-12 * delta.norm().max(1.0));
        }

        #[test]
        fn add_invariant_to_world_frame((pts, pred, gt) in random_case(), (_, w, _) in random_case()) {
            let m = ObjectModel::new("r", pts, false).unwrap();
            let a = add_metric(&m, &pred, &gt);
            let b = add_metric(&m, &w.compose(&pred), &w.compose(&gt));
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}
