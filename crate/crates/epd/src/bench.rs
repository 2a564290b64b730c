//! Timed evaluation, the from-noise comparison and ablation runs.

use std::time::Instant;

use serde::Serialize;

use epd_core::config::{AblationConfig, TrainConfig};
use epd_core::data::SceneWindow;
use epd_core::pipeline::{evaluate, EpdModel, Evaluation, InferenceMode, Stage, StageLog};

use crate::error::Result;

/// Windows predicted per batch during evaluation.
pub const EVAL_CHUNK: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub variant: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "minADE")]
    pub min_ade: f64,
    #[serde(rename = "minFDE")]
    pub min_fde: f64,
    pub windows: usize,
    pub wall_time_s: f64,
    pub invocations: u64,
}

impl MetricRecord {
    pub fn from_evaluation(dataset: &str, variant: &str, e: &Evaluation, wall_time_s: f64) -> Self {
        MetricRecord {
            dataset: dataset.into(),
            variant: variant.into(),
            k: e.k,
            min_ade: e.min_ade,
            min_fde: e.min_fde,
            windows: e.windows.len(),
            wall_time_s,
            invocations: e.invocations,
        }
    }
}

/// Metrics without wall time, so the same run always yields the same bytes.
pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["dataset", "variant", "K", "minADE", "minFDE", "windows", "invocations"])
        .expect("in-memory write");
    for r in records {
        w.write_record(&[
            r.dataset.clone(),
            r.variant.clone(),
            r.k.to_string(),
            format!("{:?}", r.min_ade),
            format!("{:?}", r.min_fde),
            r.windows.to_string(),
            r.invocations.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

pub fn timing_csv(records: &[MetricRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["dataset", "variant", "K", "wall_time_s", "invocations"]).expect("in-memory write");
    for r in records {
        w.write_record(&[
            r.dataset.clone(),
            r.variant.clone(),
            r.k.to_string(),
            format!("{:.6}", r.wall_time_s),
            r.invocations.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

pub fn evaluate_timed(
    model: &EpdModel,
    windows: &[SceneWindow],
    k: usize,
    seed: u64,
    mode: InferenceMode,
) -> Result<(Evaluation, f64)> {
    let start = Instant::now();
    let e = evaluate(model, windows, k, seed, mode, EVAL_CHUNK)?;
    Ok((e, start.elapsed().as_secs_f64()))
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub full: MetricRecord,
    pub from_noise: MetricRecord,
}

impl BenchReport {
    /// From-noise wall time over full-model wall time.
    pub fn speedup(&self) -> f64 {
        self.from_noise.wall_time_s / self.full.wall_time_s.max(1e-12)
    }

    pub fn invocations_per_window(&self) -> (f64, f64) {
        let per = |r: &MetricRecord| r.invocations as f64 / r.windows as f64;
        (per(&self.full), per(&self.from_noise))
    }
}

/// Runs the trained model and a `k`-chain from-noise baseline on the same
/// windows.
pub fn bench_relative(model: &EpdModel, dataset: &str, windows: &[SceneWindow], k: usize, seed: u64) -> Result<BenchReport> {
    let (full, t_full) = evaluate_timed(model, windows, k, seed, InferenceMode::Full)?;
    let (noise, t_noise) = evaluate_timed(model, windows, k, seed, InferenceMode::FromNoise { chains: k })?;
    Ok(BenchReport {
        full: MetricRecord::from_evaluation(dataset, "full", &full, t_full),
        from_noise: MetricRecord::from_evaluation(dataset, "from-noise", &noise, t_noise),
    })
}

/// The full model and its two single-component variants.
pub struct AblationModels {
    pub full: EpdModel,
    pub sc_only: EpdModel,
    pub pd_only: EpdModel,
    pub logs: Vec<StageLog>,
    /// Seconds spent on the PD-only denoising stage.
    pub pd_only_secs: f64,
}

/// Trains the full model once and derives both variants from its
/// snapshots. The SC-only variant is the model as it stood after the
/// correlation stage. The PD-only variant starts from the trajectory
/// stage and trains its own denoising stage with the guidance encoder.
pub fn train_ablation(config: &TrainConfig, train: &[SceneWindow]) -> Result<AblationModels> {
    let mut full_cfg = config.clone();
    full_cfg.ablation = AblationConfig::FULL;
    let mut full = EpdModel::new(full_cfg)?;
    let mut after_td = None;
    let mut after_sc = None;
    let logs = full.train(train, &mut |m, log| {
        match log.stage {
            Stage::Td => after_td = Some(m.clone()),
            Stage::Sc => after_sc = Some(m.clone()),
            _ => {}
        }
        Ok(())
    })?;
    let mut sc_only = after_sc.expect("correlation stage ran");
    sc_only.config.ablation = AblationConfig::SC_ONLY;
    let mut pd_only = after_td.expect("trajectory stage ran");
    pd_only.config.ablation = AblationConfig::PD_ONLY;
    let mut logs = logs;
    let start = Instant::now();
    logs.push(pd_only.train_stage(Stage::Pd, train)?);
    Ok(AblationModels {
        full,
        sc_only,
        pd_only,
        logs,
        pd_only_secs: start.elapsed().as_secs_f64(),
    })
}

/// Evaluates the three ablation models with their default inference modes.
pub fn ablation_records(models: &AblationModels, dataset: &str, windows: &[SceneWindow], k: usize, seed: u64) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for m in [&models.full, &models.sc_only, &models.pd_only] {
        let (e, t) = evaluate_timed(m, windows, k, seed, m.default_mode())?;
        out.push(MetricRecord::from_evaluation(dataset, m.config.ablation.label(), &e, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ade: f64, t: f64) -> MetricRecord {
        MetricRecord {
            dataset: "eth".into(),
            variant: "full".into(),
            k: 20,
            min_ade: ade,
            min_fde: 2.0 * ade,
            windows: 3,
            wall_time_s: t,
            invocations: 15,
        }
    }

    #[test]
    fn metric_csv_ignores_wall_time() {
        assert_eq!(metrics_csv(&[rec(0.1, 1.0)]), metrics_csv(&[rec(0.1, 2.0)]));
        assert_ne!(timing_csv(&[rec(0.1, 1.0)]), timing_csv(&[rec(0.1, 2.0)]));
        let text = metrics_csv(&[rec(0.1, 1.0)]);
        assert_eq!(text, "dataset,variant,K,minADE,minFDE,windows,invocations\neth,full,20,0.1,0.2,3,15\n");
    }
}
