//! End-to-end commands: synthesize, train, infer, evaluate, plot.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::annotations::write_json;
use crate::data::{generate_synthetic_dataset, read_annotations, SequenceMode, SyntheticDataset};
use crate::dataset::{
    build_samples, cache_dir_from_env, load_entries, load_sequence, video_windows, VideoEntry,
};
use crate::error::{Error, Result};
use crate::inference::{
    merge_windows, proposals_from_prediction, read_proposals, write_proposals, Proposal, TimeGrid,
};
use crate::metrics::{
    ar_at_an, ar_curve, auc_ar_an, detection_map, EvalConfig, GroundTruthByVideo, ProposalsByVideo,
};
use crate::model::{Model, ModelConfig};
use crate::train::{
    load_checkpoint, load_weights, read_checkpoint_meta, save_checkpoint, train, EpochRecord,
    JsonLog, TrainState,
};

pub const CHECKPOINT_STEM: &str = "checkpoint";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

pub fn cmd_synth(config: &RunConfig, out_dir: &Path) -> Result<SyntheticDataset> {
    generate_synthetic_dataset(&config.synth_spec(), out_dir)
}

/// Feature width of the dataset, checked against a fixed value in the config.
fn feature_channels(config: &RunConfig, entries: &[VideoEntry]) -> Result<usize> {
    let first = entries
        .first()
        .ok_or_else(|| Error::invalid("manifest lists no videos"))?;
    let c = load_sequence(first, &config.sequence_options())?.channels();
    if config.feature_channels != 0 && config.feature_channels != c {
        return Err(Error::invalid(format!(
            "config says feature_channels = {} but {} has {c}",
            config.feature_channels,
            first.feature_path.display()
        )));
    }
    Ok(c)
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
}

/// Trains on every window of every manifest video. The checkpoint, the
/// resolved config and the JSON-lines log are written under `out_dir`; the
/// checkpoint is refreshed after every epoch. With `resume`, training
/// continues from that checkpoint's epoch.
pub fn cmd_train(
    config: &RunConfig,
    manifest: &Path,
    annotations: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let entries = load_entries(manifest, annotations)?;
    let channels = feature_channels(config, &entries)?;
    let model_config = config.model_config(channels);
    model_config.validate()?;
    let cache = cache_dir_from_env();
    let samples = build_samples(&entries, &config.sequence_options(), cache.as_deref())?;
    let train_config = config.train_config();

    let (mut model, mut state) = match resume {
        Some(ck) => {
            let (model, state, meta) = load_checkpoint(ck)?;
            if meta.model != model_config {
                return Err(Error::invalid(format!(
                    "checkpoint {} was trained with a different model configuration",
                    ck.display()
                )));
            }
            (model, state)
        }
        None => {
            let model = Model::new(model_config, config.seed)?;
            let state = TrainState::fresh(&model);
            (model, state)
        }
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    config.save(&out_dir.join(CONFIG_FILE))?;
    let checkpoint = out_dir.join(CHECKPOINT_STEM);
    let mut log = JsonLog::create(&out_dir.join(LOG_FILE), resume.is_some())?;
    let seed = config.seed;
    let records = train(
        &mut model,
        &samples,
        &train_config,
        &mut state,
        &mut |m, s, rec| {
            log.write(rec)?;
            save_checkpoint(&checkpoint, m, s, seed)?;
            progress(rec);
            Ok(())
        },
    )?;
    if records.is_empty() {
        save_checkpoint(&checkpoint, &model, &state, seed)?;
    }
    Ok(TrainOutcome {
        model,
        log: records,
        checkpoint,
    })
}

/// Proposals for one video: per-window prediction, then shift, merge and
/// suppression.
pub fn infer_entry(model: &Model, entry: &VideoEntry, config: &RunConfig) -> Result<Vec<Proposal>> {
    let windows = video_windows(entry, &config.sequence_options())?;
    let mut per_window = Vec::with_capacity(windows.len());
    let mut offsets = Vec::with_capacity(windows.len());
    let dt = windows.first().map_or(0.0, |w| w.time_per_snippet);
    for w in &windows {
        let pred = model.predict(&w.features, w.valid_len)?;
        let grid = TimeGrid {
            origin: 0.0,
            time_per_snippet: w.time_per_snippet,
        };
        per_window.push(proposals_from_prediction(
            &pred,
            model.config.max_duration,
            grid,
            config.candidate_rule,
        ));
        offsets.push(w.offset);
    }
    if config.sequence_mode == SequenceMode::Rescaled {
        debug_assert!(offsets.iter().all(|&o| o == 0));
    }
    merge_windows(&per_window, &offsets, dt, &config.suppression())
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Loads a checkpoint for inference under `config`; the network shape comes
/// from the config (plus the data's feature width) and every stored tensor
/// must match it.
pub fn load_for_inference(
    config: &RunConfig,
    checkpoint: &Path,
    entries: &[VideoEntry],
) -> Result<Model> {
    read_checkpoint_meta(checkpoint)?;
    let channels = feature_channels(config, entries)?;
    let model_config: ModelConfig = config.model_config(channels);
    model_config.validate()?;
    Ok(load_weights(checkpoint, &model_config)?.0)
}

/// Runs inference over the manifest with up to `jobs` workers. Results do not
/// depend on `jobs`.
pub fn cmd_infer(
    config: &RunConfig,
    checkpoint: &Path,
    manifest: &Path,
    annotations: &Path,
    out_path: &Path,
    jobs: usize,
) -> Result<BTreeMap<String, Vec<Proposal>>> {
    let entries = load_entries(manifest, annotations)?;
    let model = load_for_inference(config, checkpoint, &entries)?;
    let results: Vec<Result<Vec<Proposal>>> = with_pool(jobs, || {
        entries
            .par_iter()
            .map(|e| infer_entry(&model, e, config))
            .collect()
    })?;
    let mut out = BTreeMap::new();
    for (e, r) in entries.iter().zip(results) {
        out.insert(e.record.id.clone(), r?);
    }
    write_proposals(out_path, &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ar_at_an: BTreeMap<usize, f64>,
    pub auc: f64,
    /// mAP keyed by tIoU threshold (two decimals).
    pub map: BTreeMap<String, f64>,
}

pub fn ground_truth(annotations: &Path) -> Result<GroundTruthByVideo> {
    Ok(read_annotations(annotations)?
        .iter()
        .map(|(id, e)| (id.clone(), e.to_record(id).instances))
        .collect())
}

/// Checks that the two files describe the same videos. An entirely empty
/// proposal file is accepted and scores zero.
pub fn check_ids(proposals: &ProposalsByVideo, gt: &GroundTruthByVideo) -> Result<()> {
    if proposals.is_empty() {
        return Ok(());
    }
    let p: BTreeSet<&String> = proposals.keys().collect();
    let g: BTreeSet<&String> = gt.keys().collect();
    let missing: Vec<String> = p.symmetric_difference(&g).map(|s| s.to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingIds(missing))
    }
}

/// Computes the metric report. Unlabelled proposals are scored
/// class-agnostically (ground-truth labels are ignored for mAP).
pub fn evaluate(
    proposals: &ProposalsByVideo,
    gt: &GroundTruthByVideo,
    config: &EvalConfig,
) -> Result<(EvalReport, Vec<(usize, f64)>)> {
    config.validate()?;
    check_ids(proposals, gt)?;
    let mut sorted = proposals.clone();
    for v in sorted.values_mut() {
        v.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
    let labelled = sorted.values().flatten().any(|p| p.label.is_some());
    let gt_for_map: GroundTruthByVideo = if labelled {
        gt.clone()
    } else {
        gt.iter()
            .map(|(k, v)| {
                let stripped = v
                    .iter()
                    .map(|g| crate::data::GroundTruthInstance {
                        label: None,
                        ..g.clone()
                    })
                    .collect();
                (k.clone(), stripped)
            })
            .collect()
    };
    let map = detection_map(&sorted, &gt_for_map, &config.detection_tious)
        .into_iter()
        .map(|(t, m)| (format!("{t:.2}"), m))
        .collect();
    let max_an = config
        .an_values
        .iter()
        .copied()
        .max()
        .unwrap_or(100)
        .max(100);
    let report = EvalReport {
        ar_at_an: ar_at_an(&sorted, gt, config),
        auc: auc_ar_an(&sorted, gt, config),
        map,
    };
    Ok((report, ar_curve(&sorted, gt, config, max_an)))
}

/// Curve file written next to the results: same stem, `.csv` extension.
pub fn curve_path(out_path: &Path) -> PathBuf {
    out_path.with_extension("csv")
}

pub fn write_curve(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["an", "ar"]).map_err(|e| csv_err(path, e))?;
    for (an, ar) in curve {
        w.write_record([an.to_string(), format!("{ar:.6}")])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

pub fn cmd_eval(
    proposals_path: &Path,
    annotations: &Path,
    config: &EvalConfig,
    out_path: &Path,
) -> Result<EvalReport> {
    let proposals = read_proposals(proposals_path)?;
    let gt = ground_truth(annotations)?;
    let (report, curve) = evaluate(&proposals, &gt, config)?;
    write_json(out_path, &report)?;
    write_curve(&curve_path(out_path), &curve)?;
    Ok(report)
}

pub fn read_curve(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::format(path, format!("missing column `{name}`")))
    };
    let (ia, ir) = (col("an")?, col("ar")?);
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let parse = |i: usize, name: &str| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(path, format!("row {}: bad `{name}` value", line + 2)))
        };
        out.push((parse(ia, "an")?, parse(ir, "ar")?));
    }
    if out.is_empty() {
        return Err(Error::format(path, "curve has no rows"));
    }
    Ok(out)
}

/// Deterministic SVG line plot of AR against AN.
pub fn render_curve_svg(points: &[(f64, f64)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let x_max = points.iter().map(|p| p.0).fold(1.0, f64::max);
    let x_min = points.iter().map(|p| p.0).fold(x_max, f64::min).min(0.0);
    let span = (x_max - x_min).max(1e-9);
    let sx = |x: f64| M + (x - x_min) / span * (W - 2.0 * M);
    let sy = |y: f64| H - M - y.clamp(0.0, 1.0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M:.1} {top:.1} L{M:.1} {bot:.1} L{right:.1} {bot:.1}" stroke="black" fill="none"/>"#,
        top = M,
        bot = H - M,
        right = W - M
    );
    for k in 0..=5 {
        let y = f64::from(k) / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{y:.1}</text>"#,
            M - 6.0,
            sy(y) + 4.0
        );
        let _ = writeln!(
            s,
            r##"<line x1="{M:.1}" y1="{v:.1}" x2="{r:.1}" y2="{v:.1}" stroke="#ddd"/>"##,
            v = sy(y),
            r = W - M
        );
    }
    for k in 0..=4 {
        let x = x_min + span * f64::from(k) / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{x:.0}</text>"#,
            sx(x),
            H - M + 16.0
        );
    }
    let pts: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" stroke="#1f77b4" stroke-width="2" fill="none"/>"##,
        pts.join(" ")
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">Average number of proposals (AN)</text>"#,
        W / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {:.1})">AR</text>"#,
        H / 2.0,
        H / 2.0
    );
    s.push_str("</svg>\n");
    s
}

pub fn cmd_plot(curve_csv: &Path, out_path: &Path) -> Result<()> {
    let points = read_curve(curve_csv)?;
    std::fs::write(out_path, render_curve_svg(&points)).map_err(|e| Error::io(out_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ScoredSegment;

    #[test]
    fn id_check_lists_both_directions() {
        let mut p = ProposalsByVideo::new();
        p.insert("a".into(), vec![ScoredSegment::new(0.0, 1.0, 0.5)]);
        p.insert("x".into(), vec![]);
        let mut g = GroundTruthByVideo::new();
        g.insert("a".into(), vec![]);
        g.insert("b".into(), vec![]);
        match check_ids(&p, &g) {
            Err(Error::MissingIds(ids)) => assert_eq!(ids, vec!["b", "x"]),
            other => panic!("{other:?}"),
        }
        assert!(check_ids(&ProposalsByVideo::new(), &g).is_ok());
    }

    #[test]
    fn plot_is_stable_and_validates_columns() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("c.csv");
        write_curve(&csv_path, &[(1, 0.1), (2, 0.3), (3, 0.35)]).unwrap();
        let out = dir.path().join("c.svg");
        cmd_plot(&csv_path, &out).unwrap();
        let first = std::fs::read(&out).unwrap();
        assert!(!first.is_empty());
        cmd_plot(&csv_path, &out).unwrap();
        assert_eq!(first, std::fs::read(&out).unwrap());

        std::fs::write(&csv_path, "an,recall\n1,0.5\n").unwrap();
        let err = cmd_plot(&csv_path, &out).unwrap_err();
        assert!(err.to_string().contains("`ar`"), "{err}");
    }
}
