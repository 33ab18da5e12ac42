//! Ablation and Top-k sweep drivers.
//!
//! Every run is an independent pure function of `(dataset, config)`, so runs
//! execute on scoped threads without affecting results.

use std::num::NonZeroUsize;
use std::thread;

use itm_core::eval::RetrievalReport;
use itm_core::features::{PairedDataset, Split};
use itm_core::select::SelectionMode;
use itm_core::trainer::{train, LossMode, TrainConfig};

use crate::error::{CliError, Result};

/// Split that final numbers are reported on: test when present, else val.
pub fn report_split(ds: &PairedDataset) -> Split {
    if ds.splits.test.is_empty() {
        log::warn!("dataset has no test split; reporting on val");
        Split::Val
    } else {
        Split::Test
    }
}

/// Trains with validation-based model selection, then evaluates the best
/// state on `split`.
pub fn train_and_report(ds: &PairedDataset, cfg: &TrainConfig, split: Split) -> Result<RetrievalReport> {
    let out = train(ds, cfg)?;
    Ok(out.best.model.quantized().evaluate_split(ds, split)?)
}

/// The four cumulative ablation rows: the full model, then the baseline
/// loss, then mean selection on top, then no aggregation on top.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let full = TrainConfig {
        loss_mode: LossMode::Harder,
        selection: SelectionMode::Max,
        disable_aggregation: false,
        ..base.clone()
    };
    let no_loss = TrainConfig { loss_mode: LossMode::Baseline, ..full.clone() };
    let no_select = TrainConfig { selection: SelectionMode::Mean, ..no_loss.clone() };
    let no_agg = TrainConfig { disable_aggregation: true, ..no_select.clone() };
    vec![("full", full), ("-loss", no_loss), ("-selection", no_select), ("-aggregation", no_agg)]
}

pub fn sweep_configs(base: &TrainConfig, kmax: usize) -> Result<Vec<(usize, TrainConfig)>> {
    if kmax < 2 {
        return Err(CliError::Usage(format!("--kmax must be at least 2, got {kmax}")));
    }
    Ok((2..=kmax).map(|k| (k, TrainConfig { k, disable_aggregation: false, ..base.clone() })).collect())
}

/// Applies `f` to every item on up to `available_parallelism` threads,
/// keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = thread::available_parallelism().map_or(1, NonZeroUsize::get).min(items.len()).max(1);
    let chunk = items.len().div_ceil(workers).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

pub fn run_ablation(ds: &PairedDataset, base: &TrainConfig) -> Result<Vec<(String, RetrievalReport)>> {
    let split = report_split(ds);
    let configs = ablation_configs(base);
    par_map(&configs, |(name, cfg)| {
        log::info!("ablation row {name}");
        train_and_report(ds, cfg, split).map(|r| (name.to_string(), r))
    })
    .into_iter()
    .collect()
}

pub fn run_sweep(ds: &PairedDataset, base: &TrainConfig, kmax: usize) -> Result<Vec<(usize, RetrievalReport)>> {
    let split = report_split(ds);
    let configs = sweep_configs(base, kmax)?;
    let l_seq = ds.min_count(itm_core::features::Modality::Visual).min(ds.min_count(itm_core::features::Modality::Textual));
    if kmax > l_seq / 2 {
        log::warn!("k up to {kmax} exceeds floor(L_seq / 2) = {}; larger k are clamped per item", l_seq / 2);
    }
    par_map(&configs, |(k, cfg)| {
        log::info!("sweep k = {k}");
        train_and_report(ds, cfg, split).map(|r| (*k, r))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_rows_are_cumulative() {
        let base = TrainConfig { selection: SelectionMode::Mean, disable_aggregation: true, ..Default::default() };
        let rows = ablation_configs(&base);
        let names: Vec<_> = rows.iter().map(|r| r.0).collect();
        assert_eq!(names, ["full", "-loss", "-selection", "-aggregation"]);
        let flags: Vec<_> = rows.iter().map(|(_, c)| (c.loss_mode, c.selection, c.disable_aggregation)).collect();
        assert_eq!(
            flags,
            [
                (LossMode::Harder, SelectionMode::Max, false),
                (LossMode::Baseline, SelectionMode::Max, false),
                (LossMode::Baseline, SelectionMode::Mean, false),
                (LossMode::Baseline, SelectionMode::Mean, true),
            ]
        );
    }

    #[test]
    fn sweep_covers_two_to_kmax() {
        let ks: Vec<_> = sweep_configs(&TrainConfig::default(), 6).unwrap().into_iter().map(|(k, c)| (k, c.k)).collect();
        assert_eq!(ks, [(2, 2), (3, 3), (4, 4), (5, 5), (6, 6)]);
        assert!(sweep_configs(&TrainConfig::default(), 1).is_err());
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<usize> = (0..37).collect();
        assert_eq!(par_map(&v, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(par_map(&Vec::<usize>::new(), |x| *x).is_empty());
    }
}
