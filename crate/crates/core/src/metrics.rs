//! Tracking evaluation: per-frame IoU, precision rate (center error under a
//! pixel threshold) and success rate (area under the IoU success curve),
//! plus the box CSV format shared by tracking output and ground truth.

use std::io::Write;

use crate::geom::Box2;

pub const PRECISION_THRESHOLD_PX: f64 = 20.0;
pub const SUCCESS_THRESHOLD_COUNT: usize = 21;

#[derive(Debug)]
pub enum MetricsError {
    LengthMismatch { pred: usize, gt: usize },
    Empty,
    Io(std::io::Error),
    Parse { line: usize, msg: String },
}

impl std::fmt::Display for MetricsError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricsError::LengthMismatch { pred, gt } => {
                write!(f, "prediction count {pred} != ground-truth count {gt}")
            }
            MetricsError::Empty => write!(f, "no frames to evaluate"),
            MetricsError::Io(e) => write!(f, "io error: {e}"),
            MetricsError::Parse { line, msg } => write!(f, "line {line}: {msg}"),
        }
    }
}

impl std::error::Error for MetricsError {}

impl From<std::io::Error> for MetricsError {
    fn from(e: std::io::Error) -> Self {
        MetricsError::Io(e)
    }
}

#[derive(Clone, Debug)]
pub struct MetricReport {
    /// Fraction of frames whose center error is within 20 px.
    pub pr: f64,
    /// Mean success over 21 evenly spaced IoU thresholds in [0, 1];
    /// zero-overlap frames count as failures at every threshold, so perfect
    /// tracking scores exactly 1 and fully disjoint predictions exactly 0.
    pub sr: f64,
    pub iou_trace: Vec<f64>,
}

pub fn compute_metrics(pred: &[Box2], gt: &[Box2]) -> Result<MetricReport, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = pred.len() as f64;
    let iou_trace: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let pr = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| p.center_distance(g) <= PRECISION_THRESHOLD_PX)
        .count() as f64
        / n;
    let mut sr = 0.0;
    for k in 0..SUCCESS_THRESHOLD_COUNT {
        let tau = k as f64 / (SUCCESS_THRESHOLD_COUNT - 1) as f64;
        let hits = iou_trace
            .iter()
            .filter(|&&iou| iou > 0.0 && iou >= tau)
            .count() as f64;
        sr += hits / n;
    }
    sr /= SUCCESS_THRESHOLD_COUNT as f64;
    Ok(MetricReport { pr, sr, iou_trace })
}

/// One `frame,x_min,y_min,x_max,y_max,confidence` line per frame.
pub fn write_track_csv(
    w: &mut impl Write,
    rows: &[(u64, Box2, f64)],
) -> Result<(), MetricsError> {
    for (frame, b, conf) in rows {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            frame, b.x_min, b.y_min, b.x_max, b.y_max, conf
        )?;
    }
    Ok(())
}

/// Ground-truth variant without the confidence column.
pub fn write_gt_csv(w: &mut impl Write, rows: &[(u64, Box2)]) -> Result<(), MetricsError> {
    for (frame, b) in rows {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6}",
            frame, b.x_min, b.y_min, b.x_max, b.y_max
        )?;
    }
    Ok(())
}

/// Parses either 5-column (gt) or 6-column (tracking) box CSV; a missing
/// confidence reads as 1.0.
pub fn read_box_csv(text: &str) -> Result<Vec<(u64, Box2, f64)>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 && parts.len() != 6 {
            return Err(MetricsError::Parse {
                line: i + 1,
                msg: format!("expected 5 or 6 fields, got {}", parts.len()),
            });
        }
        let frame = parts[0].parse::<u64>().map_err(|e| MetricsError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let mut vals = [0.0f64; 5];
        vals[4] = 1.0;
        for (j, p) in parts[1..].iter().enumerate() {
            vals[j] = p.parse::<f64>().map_err(|e| MetricsError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        out.push((
            frame,
            Box2::new(vals[0], vals[1], vals[2], vals[3]),
            vals[4],
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_tracking_scores_one() {
        let gt: Vec<Box2> = (0..10)
            .map(|i| Box2::new(i as f64, 0.0, i as f64 + 5.0, 5.0))
            .collect();
        let r = compute_metrics(&gt, &gt).unwrap();
        assert_eq!(r.pr, 1.0);
        assert_eq!(r.sr, 1.0);
    }

    #[test]
    fn hand_iou_value() {
        let pred = vec![Box2::new(0.0, 0.0, 2.0, 2.0)];
        let gt = vec![Box2::new(1.0, 0.0, 3.0, 2.0)];
        let r = compute_metrics(&pred, &gt).unwrap();
        assert!((r.iou_trace[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_far_boxes_score_zero() {
        let pred: Vec<Box2> = (0..5).map(|_| Box2::new(0.0, 0.0, 4.0, 4.0)).collect();
        let gt: Vec<Box2> = (0..5).map(|_| Box2::new(100.0, 100.0, 110.0, 110.0)).collect();
        let r = compute_metrics(&pred, &gt).unwrap();
        assert_eq!(r.pr, 0.0);
        assert_eq!(r.sr, 0.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        let a = vec![Box2::new(0.0, 0.0, 1.0, 1.0)];
        assert!(matches!(
            compute_metrics(&a, &[]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn metrics_bounded() {
        let mut rng = crate::rng::Rng::new(8);
        let pred: Vec<Box2> = (0..50)
            .map(|_| {
                let x = rng.range(0.0, 100.0);
                let y = rng.range(0.0, 100.0);
                Box2::new(x, y, x + rng.range(1.0, 30.0), y + rng.range(1.0, 30.0))
            })
            .collect();
        let gt: Vec<Box2> = (0..50)
            .map(|_| {
                let x = rng.range(0.0, 100.0);
                let y = rng.range(0.0, 100.0);
                Box2::new(x, y, x + rng.range(1.0, 30.0), y + rng.range(1.0, 30.0))
            })
            .collect();
        let r = compute_metrics(&pred, &gt).unwrap();
        assert!((0.0..=1.0).contains(&r.pr));
        assert!((0.0..=1.0).contains(&r.sr));
    }

    #[test]
    fn csv_round_trip_and_tolerant_parse() {
        let rows = vec![
            (0u64, Box2::new(1.0, 2.0, 3.0, 4.0), 0.9),
            (1, Box2::new(1.5, 2.5, 3.5, 4.5), 0.8),
        ];
        let mut buf = Vec::new();
        write_track_csv(&mut buf, &rows).unwrap();
        let parsed = read_box_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert!((parsed[0].2 - 0.9).abs() < 1e-9);

        let gt_rows: Vec<(u64, Box2)> = rows.iter().map(|(f, b, _)| (*f, *b)).collect();
        let mut buf = Vec::new();
        write_gt_csv(&mut buf, &gt_rows).unwrap();
        let parsed = read_box_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(parsed[1].2, 1.0);
        assert!((parsed[1].1.x_min - 1.5).abs() < 1e-9);
    }
}
