//! Report rows, CSV output and aggregation into metric-vs-budget curves.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::warn;

use super::plan::Scheme;
use crate::error::{param_err, Error, Result};

/// Column order of the attack report.
pub const REPORT_COLUMNS: [&str; 17] = [
    "experiment_id",
    "key_seed",
    "image_id",
    "scheme",
    "attack_kind",
    "target_strategy",
    "target_psnr_a",
    "achieved_psnr_a",
    "achieved_psnr_w",
    "detected",
    "ber",
    "pfa_target",
    "payload",
    "iterations",
    "lambda",
    "eta",
    "wall_time_ms",
];

pub const MARK_COLUMNS: [&str; 11] = [
    "experiment_id",
    "key_seed",
    "image_id",
    "scheme",
    "pfa_target",
    "payload",
    "achieved_psnr_w",
    "detected",
    "ber",
    "passed",
    "wall_time_ms",
];

/// Pre-attack verification of one embedded mark.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkRecord {
    pub experiment_id: String,
    pub key_seed: u64,
    pub image_id: String,
    pub scheme: Scheme,
    pub pfa_target: Option<f64>,
    pub payload: Option<usize>,
    pub achieved_psnr_w: f64,
    pub detected: bool,
    pub ber: Option<f64>,
    pub passed: bool,
    pub wall_time_ms: u64,
}

/// One attack instance.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackRow {
    pub experiment_id: String,
    pub key_seed: u64,
    pub image_id: String,
    pub scheme: Scheme,
    pub attack_kind: String,
    /// Empty unless the attack is targeted.
    pub target_strategy: String,
    pub target_psnr_a: f64,
    pub achieved_psnr_a: f64,
    pub achieved_psnr_w: f64,
    pub detected: bool,
    /// Present iff multi-bit.
    pub ber: Option<f64>,
    pub pfa_target: Option<f64>,
    pub payload: Option<usize>,
    pub iterations: usize,
    pub lambda: f64,
    pub eta: f64,
    pub wall_time_ms: u64,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl AttackRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.experiment_id.clone(),
            self.key_seed.to_string(),
            self.image_id.clone(),
            self.scheme.to_string(),
            self.attack_kind.clone(),
            self.target_strategy.clone(),
            self.target_psnr_a.to_string(),
            self.achieved_psnr_a.to_string(),
            self.achieved_psnr_w.to_string(),
            self.detected.to_string(),
            opt(self.ber),
            opt(self.pfa_target),
            opt(self.payload),
            self.iterations.to_string(),
            self.lambda.to_string(),
            self.eta.to_string(),
            self.wall_time_ms.to_string(),
        ]
    }
}

impl MarkRecord {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.experiment_id.clone(),
            self.key_seed.to_string(),
            self.image_id.clone(),
            self.scheme.to_string(),
            opt(self.pfa_target),
            opt(self.payload),
            self.achieved_psnr_w.to_string(),
            self.detected.to_string(),
            opt(self.ber),
            self.passed.to_string(),
            self.wall_time_ms.to_string(),
        ]
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// CSV writer that emits the header up front and rows as they arrive.
pub struct CsvSink<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(w: W, header: &[&str]) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(header).map_err(csv_err)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, fields: &[String]) -> Result<()> {
        self.inner.write_record(fields).map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }
}

fn write_table(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut sink = CsvSink::new(std::fs::File::create(path)?, header)?;
    for r in rows {
        sink.write(&r)?;
    }
    Ok(())
}

/// One point of a metric-vs-budget curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub scheme: Scheme,
    pub attack_kind: String,
    pub target_strategy: String,
    pub pfa_target: Option<f64>,
    pub payload: Option<usize>,
    pub target_psnr_a: f64,
    pub count: usize,
    /// Fraction of rows still detected (the copy-attack success rate).
    pub detection_rate: f64,
    /// `1 - detection_rate` (the removal probability of miss).
    pub p_miss: f64,
    pub ber_mean: Option<f64>,
    pub ber_sd: Option<f64>,
    pub min_achieved_psnr_a: f64,
}

impl CurvePoint {
    /// Series label: strategy (if any) and the pfa or payload.
    pub fn series(&self) -> String {
        let param = match (self.pfa_target, self.payload) {
            (Some(p), _) => format!("pfa={p}"),
            (_, Some(l)) => format!("payload={l}"),
            _ => String::new(),
        };
        if self.target_strategy.is_empty() {
            param
        } else {
            format!("{} {param}", self.target_strategy)
        }
    }
}

pub const AGGREGATE_COLUMNS: [&str; 12] = [
    "scheme",
    "attack_kind",
    "target_strategy",
    "pfa_target",
    "payload",
    "target_psnr_a",
    "count",
    "detection_rate",
    "p_miss",
    "ber_mean",
    "ber_sd",
    "min_achieved_psnr_a",
];

/// Milli-dB keys give a total order on budgets.
type GroupKey = (Scheme, String, String, Option<u64>, Option<usize>, i64);

/// Groups rows by (scheme, attack, strategy, pfa or payload, budget). Points
/// come out ordered by group and then increasing budget.
pub fn aggregate(rows: &[AttackRow]) -> Result<Vec<CurvePoint>> {
    if rows.is_empty() {
        return param_err("no rows to aggregate");
    }
    let mut groups: BTreeMap<GroupKey, Vec<&AttackRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.scheme,
            r.attack_kind.clone(),
            r.target_strategy.clone(),
            r.pfa_target.map(f64::to_bits),
            r.payload,
            (r.target_psnr_a * 1000.0).round() as i64,
        );
        groups.entry(key).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (key, members) in groups {
        if members.is_empty() {
            warn!("empty aggregation group {key:?} omitted");
            continue;
        }
        let n = members.len() as f64;
        let detected = members.iter().filter(|r| r.detected).count() as f64 / n;
        let bers: Vec<f64> = members.iter().filter_map(|r| r.ber).collect();
        let (ber_mean, ber_sd) = if bers.is_empty() {
            (None, None)
        } else {
            let m = bers.iter().sum::<f64>() / bers.len() as f64;
            let var = bers.iter().map(|b| (b - m).powi(2)).sum::<f64>() / bers.len() as f64;
            (Some(m), Some(var.sqrt()))
        };
        let first = members[0];
        out.push(CurvePoint {
            scheme: first.scheme,
            attack_kind: first.attack_kind.clone(),
            target_strategy: first.target_strategy.clone(),
            pfa_target: first.pfa_target,
            payload: first.payload,
            target_psnr_a: first.target_psnr_a,
            count: members.len(),
            detection_rate: detected,
            p_miss: 1.0 - detected,
            ber_mean,
            ber_sd,
            min_achieved_psnr_a: members
                .iter()
                .map(|r| r.achieved_psnr_a)
                .fold(f64::INFINITY, f64::min),
        });
    }
    Ok(out)
}

/// Points of one series selected by scheme, attack and a series label,
/// ordered by budget.
pub fn series<'a>(
    points: &'a [CurvePoint],
    scheme: Scheme,
    attack_kind: &str,
    label: &str,
) -> Vec<&'a CurvePoint> {
    points
        .iter()
        .filter(|p| p.scheme == scheme && p.attack_kind == attack_kind && p.series() == label)
        .collect()
}

/// Adjacent pairs that break monotonicity. `non_increasing` selects the
/// direction; ties never count.
pub fn monotone_violations(ys: &[f64], non_increasing: bool) -> usize {
    ys.windows(2)
        .filter(|w| {
            if non_increasing {
                w[1] > w[0]
            } else {
                w[1] < w[0]
            }
        })
        .count()
}

/// Plot data: one row per point with `x` the target PSNR and `[ylo, yhi]`
/// one standard deviation around `y`.
pub const PLOT_COLUMNS: [&str; 5] = ["series", "x", "y", "ylo", "yhi"];

/// Which metric a figure shows.
#[derive(Clone, Copy, Debug)]
enum Metric {
    Ber,
    PMiss,
}

fn plot_rows(
    points: &[CurvePoint],
    scheme: Scheme,
    attack_kind: &str,
    metric: Metric,
) -> Vec<Vec<String>> {
    points
        .iter()
        .filter(|p| p.scheme == scheme && p.attack_kind == attack_kind)
        .filter_map(|p| {
            let (y, sd) = match metric {
                Metric::Ber => (p.ber_mean?, p.ber_sd?),
                // Binomial standard deviation of the proportion.
                Metric::PMiss => (
                    p.p_miss,
                    (p.p_miss * (1.0 - p.p_miss) / p.count as f64).sqrt(),
                ),
            };
            Some(vec![
                p.series(),
                p.target_psnr_a.to_string(),
                y.to_string(),
                (y - sd).max(0.0).to_string(),
                (y + sd).min(1.0).to_string(),
            ])
        })
        .collect()
}

/// Figure files written by [`write_outputs`].
pub const FIGURE_FILES: [&str; 4] = [
    "fig2_copy_ber.csv",
    "fig3_removal_unt_pm.csv",
    "fig4_removal_tgt_pm.csv",
    "fig5_removal_tgt_ber.csv",
];

/// Writes `embeds.csv` and, when there are attack rows, `aggregate.csv` and
/// the four plot-data files into `dir`. The attack report itself is streamed
/// by the caller.
pub fn write_outputs(dir: &Path, marks: &[MarkRecord], rows: &[AttackRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_table(
        &dir.join("embeds.csv"),
        &MARK_COLUMNS,
        marks.iter().map(MarkRecord::fields),
    )?;
    if rows.is_empty() {
        warn!("no attack rows; skipping aggregates");
        return Ok(());
    }
    let points = aggregate(rows)?;
    write_table(
        &dir.join("aggregate.csv"),
        &AGGREGATE_COLUMNS,
        points.iter().map(|p| {
            vec![
                p.scheme.to_string(),
                p.attack_kind.clone(),
                p.target_strategy.clone(),
                opt(p.pfa_target),
                opt(p.payload),
                p.target_psnr_a.to_string(),
                p.count.to_string(),
                p.detection_rate.to_string(),
                p.p_miss.to_string(),
                opt(p.ber_mean),
                opt(p.ber_sd),
                p.min_achieved_psnr_a.to_string(),
            ]
        }),
    )?;
    let figures = [
        (Scheme::MultiBit, "copy", Metric::Ber),
        (Scheme::ZeroBit, "removal_untargeted", Metric::PMiss),
        (Scheme::ZeroBit, "removal_targeted", Metric::PMiss),
        (Scheme::MultiBit, "removal_targeted", Metric::Ber),
    ];
    for (file, (scheme, kind, metric)) in FIGURE_FILES.iter().zip(figures) {
        write_table(
            &dir.join(file),
            &PLOT_COLUMNS,
            plot_rows(&points, scheme, kind, metric),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(
        scheme: Scheme,
        kind: &str,
        psnr: f64,
        detected: bool,
        ber: Option<f64>,
        payload: Option<usize>,
    ) -> AttackRow {
        AttackRow {
            experiment_id: "t".into(),
            key_seed: 1,
            image_id: "a.png".into(),
            scheme,
            attack_kind: kind.into(),
            target_strategy: String::new(),
            target_psnr_a: psnr,
            achieved_psnr_a: psnr + 0.5,
            achieved_psnr_w: 42.0,
            detected,
            ber,
            pfa_target: matches!(scheme, Scheme::ZeroBit).then_some(1e-4),
            payload,
            iterations: 100,
            lambda: 1.0,
            eta: 1.0,
            wall_time_ms: 0,
        }
    }

    #[test]
    fn all_detected_is_full_success() {
        let rows = vec![row(Scheme::ZeroBit, "copy", 35.0, true, None, None); 3];
        let p = aggregate(&rows).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].detection_rate, 1.0);
        assert_eq!(p[0].p_miss, 0.0);
        assert_eq!(p[0].count, 3);
    }

    #[test]
    fn ber_mean_and_sd() {
        let rows = vec![
            row(Scheme::MultiBit, "copy", 35.0, false, Some(0.2), Some(10)),
            row(Scheme::MultiBit, "copy", 35.0, false, Some(0.4), Some(10)),
        ];
        let p = aggregate(&rows).unwrap();
        assert!((p[0].ber_mean.unwrap() - 0.3).abs() < 1e-12);
        assert!((p[0].ber_sd.unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn payloads_never_pooled() {
        let rows = vec![
            row(Scheme::MultiBit, "copy", 35.0, true, Some(0.0), Some(10)),
            row(Scheme::MultiBit, "copy", 35.0, false, Some(0.5), Some(100)),
            row(Scheme::MultiBit, "copy", 30.0, true, Some(0.0), Some(10)),
        ];
        let p = aggregate(&rows).unwrap();
        assert_eq!(p.len(), 3);
        let s = series(&p, Scheme::MultiBit, "copy", "payload=10");
        assert_eq!(
            s.iter().map(|p| p.target_psnr_a).collect::<Vec<_>>(),
            vec![30.0, 35.0]
        );
    }

    #[test]
    fn empty_rows_rejected() {
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn monotonicity_counts() {
        assert_eq!(monotone_violations(&[1.0, 1.0, 0.8, 0.2], true), 0);
        assert_eq!(monotone_violations(&[1.0, 0.9, 0.95, 0.2], true), 1);
        assert_eq!(monotone_violations(&[0.0, 0.1, 0.05], false), 1);
    }

    #[test]
    fn outputs_written() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            row(
                Scheme::ZeroBit,
                "removal_untargeted",
                35.0,
                false,
                None,
                None,
            ),
            row(Scheme::MultiBit, "copy", 35.0, true, Some(0.0), Some(10)),
        ];
        write_outputs(dir.path(), &[], &rows).unwrap();
        for f in FIGURE_FILES.iter().chain(&["aggregate.csv", "embeds.csv"]) {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let fig3 = std::fs::read_to_string(dir.path().join("fig3_removal_unt_pm.csv")).unwrap();
        assert_eq!(fig3, "series,x,y,ylo,yhi\npfa=0.0001,35,1,1,1\n");
    }
}
