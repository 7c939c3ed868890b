//! Tolerance accuracy, prediction spread, evaluation reports and the
//! comparison harnesses (loss family, input channels, fusion point).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::data_pipeline::{parallel_map, FrameStore, SequenceWindow};
use crate::error::{invalid, Error, Result};
use crate::losses::LossConfig;
use crate::network::{InjectAt, ModelConfig, SteeringModel, INPUT_COLS, INPUT_ROWS};
use crate::scalar::Scalar;
use crate::synthetic_track::{steering_histogram, Histogram};
use crate::training::{train, PreparedData, TrainConfig, WindowBatch};

pub const DEFAULT_TOLERANCE_DEG: f64 = 5.0;
pub const HISTOGRAM_BINS: usize = 41;
/// Windows per forward batch during evaluation.
const EVAL_CHUNK: usize = 32;

fn check_pair(preds: &[f64], truths: &[f64]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Validation("no predictions to score".into()));
    }
    if preds.len() != truths.len() {
        return Err(invalid(format!("{} predictions vs {} labels", preds.len(), truths.len())));
    }
    Ok(())
}

/// Fraction of predictions with `|pred - truth| <= tol_deg` (inclusive), angles in radians.
pub fn tolerance_accuracy(preds: &[f64], truths: &[f64], tol_deg: f64) -> Result<f64> {
    check_pair(preds, truths)?;
    if !(tol_deg > 0.0 && tol_deg.is_finite()) {
        return Err(invalid(format!("tolerance must be positive degrees (got {tol_deg})")));
    }
    let tol = tol_deg.to_radians();
    let hits = preds.iter().zip(truths).filter(|(p, t)| (*p - *t).abs() <= tol).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Population standard deviation (divides by `n`).
pub fn prediction_sd(preds: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Validation("no predictions to summarize".into()));
    }
    let n = preds.len() as f64;
    let mean = preds.iter().sum::<f64>() / n;
    let var = preds.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

pub fn mean_absolute_error(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_pair(preds, truths)?;
    Ok(preds.iter().zip(truths).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub drive_id: String,
    pub timestamp: f64,
    pub truth: f64,
    pub prediction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub sd: f64,
    pub mae: f64,
    pub n: usize,
    pub tolerance_deg: f64,
    /// Ordered by drive id, then timestamp.
    pub trace: Vec<TracePoint>,
    /// Of the predictions.
    pub histogram: Histogram,
}

impl EvalReport {
    pub fn predictions(&self) -> Vec<f64> {
        self.trace.iter().map(|t| t.prediction).collect()
    }

    pub fn truths(&self) -> Vec<f64> {
        self.trace.iter().map(|t| t.truth).collect()
    }

    pub fn from_trace(trace: Vec<TracePoint>, tolerance_deg: f64) -> Result<Self> {
        let preds: Vec<f64> = trace.iter().map(|t| t.prediction).collect();
        let truths: Vec<f64> = trace.iter().map(|t| t.truth).collect();
        let limit = preds.iter().chain(&truths).fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(Self {
            accuracy: tolerance_accuracy(&preds, &truths, tolerance_deg)?,
            sd: prediction_sd(&preds)?,
            mae: mean_absolute_error(&preds, &truths)?,
            n: trace.len(),
            tolerance_deg,
            histogram: steering_histogram(&preds, HISTOGRAM_BINS, Some(limit))?,
            trace,
        })
    }

    pub fn summary(&self) -> String {
        format!(
            "n={} accuracy@{}deg={:.4} sd={:.6} mae={:.6}",
            self.n, self.tolerance_deg, self.accuracy, self.sd, self.mae
        )
    }
}

/// Predictions for `windows` in order. Chunks run on up to `workers` threads;
/// the result does not depend on the worker count.
pub fn predict<T: Scalar>(
    model: &SteeringModel<T>,
    store: &FrameStore,
    windows: &[SequenceWindow],
    workers: usize,
) -> Result<Vec<f64>> {
    let cfg = model.config();
    if let Some(w) = windows.iter().find(|w| w.seq_len != cfg.seq_len) {
        return Err(Error::Config(format!(
            "window length {} does not match model seq_len={}",
            w.seq_len, cfg.seq_len
        )));
    }
    if let Some(w) = windows.iter().find(|w| w.drive >= store.drives.len()) {
        return Err(invalid(format!("window references drive {} of {}", w.drive, store.drives.len())));
    }
    let inputs = store.model_inputs::<T>(cfg)?;
    let chunks: Vec<&[SequenceWindow]> = windows.chunks(EVAL_CHUNK).collect();
    let parts = parallel_map(&chunks, workers.max(1), |chunk| -> Result<Vec<f64>> {
        let refs: Vec<&SequenceWindow> = chunk.iter().collect();
        let batch = WindowBatch::assemble(store, &inputs, &refs);
        let preds = model.forward_batch(&batch.frames(&inputs), &batch.windows)?;
        Ok(preds.into_iter().map(|p| p.as_f64()).collect())
    });
    let mut out = Vec::with_capacity(windows.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Scores `model` on `windows`; the trace is ordered by drive id, then timestamp.
pub fn evaluate<T: Scalar>(
    model: &SteeringModel<T>,
    store: &FrameStore,
    windows: &[SequenceWindow],
    tol_deg: f64,
    workers: usize,
) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::Validation("no windows to evaluate".into()));
    }
    let mut ordered = windows.to_vec();
    ordered.sort_by(|a, b| {
        a.drive_id
            .cmp(&b.drive_id)
            .then(a.end_timestamp.total_cmp(&b.end_timestamp))
    });
    let preds = predict(model, store, &ordered, workers)?;
    let trace = ordered
        .iter()
        .zip(preds)
        .map(|(w, p)| TracePoint {
            drive_id: w.drive_id.clone(),
            timestamp: w.end_timestamp,
            truth: w.target,
            prediction: p,
        })
        .collect();
    EvalReport::from_trace(trace, tol_deg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub config: TrainConfig,
    pub report: EvalReport,
    pub fingerprint: String,
    /// Spatial size of the orientation maps the model consumes, if any.
    pub map_size: Option<(usize, usize)>,
    pub best_step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub title: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let header = ["variant", "accuracy", "sd", "mae", "n", "maps", "split"];
        let cells: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    format!("{:.4}", r.report.accuracy),
                    format!("{:.6}", r.report.sd),
                    format!("{:.6}", r.report.mae),
                    r.report.n.to_string(),
                    r.map_size.map_or("-".into(), |(h, w)| format!("{h}x{w}")),
                    r.fingerprint.clone(),
                ]
            })
            .collect();
        let mut width = header.map(str::len);
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = format!("{}\n", self.title);
        let line = |s: &mut String, row: &[&str]| {
            let parts: Vec<String> = row.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        };
        line(&mut s, &header);
        for row in &cells {
            let refs: Vec<&str> = row.iter().map(String::as_str).collect();
            line(&mut s, &refs);
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mapped = |e: csv::Error| Error::InvalidArgument(e.to_string());
        w.write_record(["variant", "accuracy", "sd", "mae", "n", "tolerance_deg", "map_rows", "map_cols", "split", "best_step"])
            .map_err(mapped)?;
        for r in &self.rows {
            let (mr, mc) = r.map_size.map_or((String::new(), String::new()), |(h, c)| (h.to_string(), c.to_string()));
            w.write_record([
                r.label.clone(),
                format!("{:?}", r.report.accuracy),
                format!("{:?}", r.report.sd),
                format!("{:?}", r.report.mae),
                r.report.n.to_string(),
                format!("{:?}", r.report.tolerance_deg),
                mr,
                mc,
                r.fingerprint.clone(),
                r.best_step.to_string(),
            ])
            .map_err(mapped)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Writes `report.txt` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        let csv_path = dir.join("report.csv");
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))
    }
}

/// Keys whose values differ between two resolved configurations.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    let (ka, kb) = (a.to_kv(), b.to_kv());
    let mut keys: Vec<String> = ka
        .iter()
        .chain(kb.iter())
        .map(|(k, _)| k.to_string())
        .filter(|k| ka.get(k) != kb.get(k))
        .collect();
    keys.sort();
    keys.dedup();
    keys
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn map_size(model: &ModelConfig) -> Option<(usize, usize)> {
    match model.inject_at {
        InjectAt::Input => Some((INPUT_ROWS, INPUT_COLS)),
        _ => model.fusion_size(),
    }
}

/// Trains `cfg` on the training split, selects its best-validation checkpoint
/// and scores it on the held-out split.
pub fn run_variant(label: &str, cfg: &TrainConfig, data: &PreparedData) -> Result<ComparisonRow> {
    let mut cfg = cfg.clone();
    if let Some(dir) = &cfg.output_dir {
        cfg.output_dir = Some(dir.join(slug(label)));
    }
    let outcome = train::<f32>(&cfg, &data.store, &data.train, &data.val)?;
    let report = evaluate(&outcome.best, &data.store, data.held_out(), DEFAULT_TOLERANCE_DEG, cfg.workers)?;
    if let Some(dir) = &cfg.output_dir {
        export_trace(&report, &dir.join("trace.csv"))?;
        export_histogram(&report, &dir.join("histogram.csv"))?;
    }
    Ok(ComparisonRow {
        label: label.to_string(),
        map_size: map_size(&cfg.model),
        config: cfg,
        report,
        fingerprint: data.fingerprint.clone(),
        best_step: outcome.best_step,
    })
}

/// One model per loss configuration, all else equal.
pub fn run_loss_comparison(base: &TrainConfig, families: &[LossConfig<f64>], data: &PreparedData) -> Result<ComparisonTable> {
    if families.is_empty() {
        return Err(invalid("loss comparison needs at least one loss configuration"));
    }
    let mut rows = Vec::with_capacity(families.len());
    for loss in families {
        let cfg = TrainConfig { loss: *loss, ..base.clone() };
        rows.push(run_variant(loss.family.as_str(), &cfg, data)?);
    }
    Ok(ComparisonTable {
        title: "loss comparison".into(),
        rows,
    })
}

/// RGB input against RGB plus orientation channels at the input layer.
pub fn run_input_comparison(base: &TrainConfig, data: &PreparedData) -> Result<ComparisonTable> {
    let variants = [
        ("RGB", ModelConfig { in_channels: 3, inject_at: InjectAt::None, ..base.model }),
        ("RGB+HA+VA", ModelConfig { in_channels: 5, inject_at: InjectAt::Input, ..base.model }),
    ];
    let mut rows = Vec::with_capacity(2);
    for (label, model) in variants {
        let cfg = TrainConfig { model, ..base.clone() };
        rows.push(run_variant(label, &cfg, data)?);
    }
    Ok(ComparisonTable {
        title: "input comparison".into(),
        rows,
    })
}

/// Orientation maps injected at the input and after each convolution.
pub fn run_fusion_ablation(base: &TrainConfig, data: &PreparedData) -> Result<ComparisonTable> {
    let mut rows = Vec::with_capacity(InjectAt::FUSION_POINTS.len());
    for at in InjectAt::FUSION_POINTS {
        let model = ModelConfig {
            seq_len: base.model.seq_len,
            lstm_hidden: base.model.lstm_hidden,
            lstm_layers: base.model.lstm_layers,
            fc_dim: base.model.fc_dim,
            ..ModelConfig::with_fusion(at)
        };
        let cfg = TrainConfig { model, ..base.clone() };
        rows.push(run_variant(&at.to_string(), &cfg, data)?);
    }
    Ok(ComparisonTable {
        title: "fusion ablation".into(),
        rows,
    })
}

fn png_path(path: &Path) -> PathBuf {
    path.with_extension("png")
}

/// Writes `drive_id,timestamp,truth,prediction` rows and a line plot beside them (`.png`).
pub fn export_trace(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["drive_id", "timestamp", "truth", "prediction"]).map_err(|e| csv_io(path, e))?;
    for t in &report.trace {
        w.write_record([
            t.drive_id.clone(),
            format!("{:?}", t.timestamp),
            format!("{:?}", t.truth),
            format!("{:?}", t.prediction),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    plot_trace(&report.trace, &png_path(path))
}

pub fn read_trace(path: &Path) -> Result<Vec<TracePoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let bad = |m: &str| Error::Format {
            line: i + 2,
            message: format!("{}: {m}", path.display()),
        };
        if rec.len() != 4 {
            return Err(bad("expected drive_id,timestamp,truth,prediction"));
        }
        let num = |j: usize| rec[j].parse::<f64>().map_err(|_| bad("bad number"));
        out.push(TracePoint {
            drive_id: rec[0].to_string(),
            timestamp: num(1)?,
            truth: num(2)?,
            prediction: num(3)?,
        });
    }
    Ok(out)
}

/// Writes `lower,upper,count` rows of the prediction histogram and a bar plot beside them.
pub fn export_histogram(report: &EvalReport, path: &Path) -> Result<()> {
    write_histogram(&report.histogram, path)
}

pub fn write_histogram(h: &Histogram, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["lower", "upper", "count"]).map_err(|e| csv_io(path, e))?;
    for (i, c) in h.counts.iter().enumerate() {
        w.write_record([format!("{:?}", h.edges[i]), format!("{:?}", h.edges[i + 1]), c.to_string()])
            .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    plot_histogram(h, &png_path(path))
}

pub fn read_histogram(path: &Path) -> Result<Histogram> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut edges = Vec::new();
    let mut counts = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let bad = |m: &str| Error::Format {
            line: i + 2,
            message: format!("{}: {m}", path.display()),
        };
        if rec.len() != 3 {
            return Err(bad("expected lower,upper,count"));
        }
        let lo: f64 = rec[0].parse().map_err(|_| bad("bad lower edge"))?;
        let hi: f64 = rec[1].parse().map_err(|_| bad("bad upper edge"))?;
        if edges.is_empty() {
            edges.push(lo);
        } else if edges.last() != Some(&lo) {
            return Err(bad("bins are not contiguous"));
        }
        edges.push(hi);
        counts.push(rec[2].parse().map_err(|_| bad("bad count"))?);
    }
    if counts.is_empty() {
        return Err(Error::Format {
            line: 1,
            message: format!("{}: histogram has no bins", path.display()),
        });
    }
    Ok(Histogram { edges, counts })
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            line: 0,
            message: format!("{}: {other:?}", path.display()),
        },
    }
}

const PLOT_W: u32 = 800;
const PLOT_H: u32 = 300;
const MARGIN: f32 = 20.0;

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Ground truth in black, prediction in red, zero line in grey.
pub fn plot_trace(trace: &[TracePoint], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let limit = trace
        .iter()
        .flat_map(|t| [t.truth.abs(), t.prediction.abs()])
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let n = trace.len().max(2);
    let x = |i: usize| MARGIN + (PLOT_W as f32 - 2.0 * MARGIN) * i as f32 / (n - 1) as f32;
    let y = |v: f64| PLOT_H as f32 / 2.0 - (PLOT_H as f32 / 2.0 - MARGIN) * (v / limit) as f32;
    draw_line_segment_mut(&mut img, (MARGIN, y(0.0)), (PLOT_W as f32 - MARGIN, y(0.0)), Rgb([190, 190, 190]));
    for i in 1..trace.len() {
        draw_line_segment_mut(&mut img, (x(i - 1), y(trace[i - 1].truth)), (x(i), y(trace[i].truth)), Rgb([0, 0, 0]));
        draw_line_segment_mut(
            &mut img,
            (x(i - 1), y(trace[i - 1].prediction)),
            (x(i), y(trace[i].prediction)),
            Rgb([210, 30, 30]),
        );
    }
    save_png(&img, path)
}

pub fn plot_histogram(h: &Histogram, path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let top = h.counts.iter().copied().max().unwrap_or(0).max(1) as f32;
    let bins = h.counts.len().max(1) as f32;
    let bar_w = (PLOT_W as f32 - 2.0 * MARGIN) / bins;
    for (i, &c) in h.counts.iter().enumerate() {
        let height = ((PLOT_H as f32 - 2.0 * MARGIN) * c as f32 / top).round() as u32;
        if height == 0 {
            continue;
        }
        let left = (MARGIN + bar_w * i as f32).round() as i32;
        let width = (bar_w - 1.0).max(1.0).round() as u32;
        let rect = Rect::at(left, (PLOT_H as f32 - MARGIN) as i32 - height as i32).of_size(width, height);
        draw_filled_rect_mut(&mut img, rect, Rgb([60, 90, 170]));
    }
    save_png(&img, path)
}
