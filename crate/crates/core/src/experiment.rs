//! Seeded training runs and the three-arm ablation on resolved configs.

use std::path::Path;

use crate::backbone::{ModelConfig, SegModel};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_manifest, split_by_hash, synth_dataset, Sample, SceneConfig};
use crate::error::Result;
use crate::gpm::Ordering;
use crate::metrics::{aggregate, SeedAggregate, SegScores, SummaryRow};
use crate::train::{evaluate, train_run, RunOptions, TrainOutcome};

/// Name of the generated test set.
pub const SYNTHETIC_TEST: &str = "synthetic";
const TEST_SEED_SALT: u64 = 0x7e57_7e57;

#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub tests: Vec<(String, Vec<Sample>)>,
}

fn split(pool: Vec<Sample>, val_fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    let ids: Vec<&str> = pool.iter().map(|s| s.id.as_str()).collect();
    let (ti, vi) = split_by_hash(&ids, val_fraction);
    let pick = |idx: &[usize]| idx.iter().map(|&i| pool[i].clone()).collect::<Vec<_>>();
    (pick(&ti), pick(&vi))
}

/// Training pool split by id hash into train and validation, plus test sets.
pub fn load_data(cfg: &RunConfig) -> Result<DataSplits> {
    let size = cfg.train.image_size;
    let root = cfg.data_root();
    let mut tests = Vec::new();
    let pool = match &cfg.data.train_manifest {
        Some(path) => load_manifest(&root.join(path), &root, Some((size, size)))?,
        None => {
            let scenes = SceneConfig::new(size);
            if cfg.data.synth_test_count > 0 {
                let seed = cfg.data.synth_seed ^ TEST_SEED_SALT;
                tests.push((SYNTHETIC_TEST.to_string(), synth_dataset(cfg.data.synth_test_count, &scenes, seed)?));
            }
            synth_dataset(cfg.data.synth_count, &scenes, cfg.data.synth_seed)?
        }
    };
    for (name, path) in &cfg.data.test_manifests {
        tests.push((name.clone(), load_manifest(&root.join(path), &root, Some((size, size)))?));
    }
    let (train, val) = split(pool, cfg.train.val_fraction);
    Ok(DataSplits { train, val, tests })
}

pub fn method_label(cfg: &RunConfig) -> String {
    if cfg.gpm {
        format!("U-Net + GPMs ({})", cfg.gpm_settings.ordering.as_str())
    } else {
        "U-Net".to_string()
    }
}

/// Model for training seed `seed`: initialization is offset by the seed.
pub fn model_for_seed(cfg: &RunConfig, seed: u64) -> Result<SegModel> {
    SegModel::new(ModelConfig {
        init_seed: cfg.init_seed.wrapping_add(seed),
        ..cfg.model_config()
    })
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    /// Test set name and scores, in the order of [`DataSplits::tests`].
    pub scores: Vec<(String, SegScores)>,
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub method: String,
    pub config: RunConfig,
    pub runs: Vec<SeedRun>,
    /// Per test set, aggregated over seeds.
    pub aggregates: Vec<(String, SeedAggregate)>,
}

impl ArmResult {
    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.aggregates
            .iter()
            .map(|(dataset, agg)| SummaryRow {
                dataset: dataset.clone(),
                method: self.method.clone(),
                dsc: agg.mean_dsc,
                iou: agg.mean_iou,
            })
            .collect()
    }

    pub fn mean_dsc(&self, dataset: &str) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|(d, _)| d == dataset)
            .map(|(_, a)| a.mean_dsc)
    }
}

/// Trains one model per configured seed and scores each on every test set.
/// With a validation split and an output directory, the best checkpoint is
/// the one scored; otherwise the final weights are.
pub fn train_seeds(cfg: &RunConfig, data: &DataSplits, out_dir: Option<&Path>, verbose: bool) -> Result<ArmResult> {
    let method = method_label(cfg);
    let mut runs = Vec::new();
    for &seed in &cfg.train.seeds {
        let mut model = model_for_seed(cfg, seed)?;
        let opts = RunOptions {
            out_dir: out_dir.map(|d| d.join(format!("seed{seed}"))),
            manifest: serde_json::json!({ "method": method, "config_text": cfg.to_text() }),
            verbose,
        };
        let outcome = train_run(&cfg.train, &mut model, &data.train, &data.val, seed, &opts)?;
        if let Some(best) = &outcome.state.best_checkpoint {
            checkpoint::restore(&mut model, &checkpoint::load(best)?)?;
        }
        let scores = data
            .tests
            .iter()
            .map(|(name, samples)| Ok((name.clone(), evaluate(&model, samples, cfg.train.batch_size)?)))
            .collect::<Result<Vec<_>>>()?;
        runs.push(SeedRun { seed, outcome, scores });
    }
    let aggregates = data
        .tests
        .iter()
        .enumerate()
        .map(|(i, (name, _))| Ok((name.clone(), aggregate(runs.iter().map(|r| r.scores[i].1.clone()).collect())?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ArmResult {
        method,
        config: cfg.clone(),
        runs,
        aggregates,
    })
}

/// Baseline, GPMs bottom-to-top and GPMs top-to-bottom; they differ from
/// `cfg` only in the GPM switch and ordering.
pub fn ablation_arms(cfg: &RunConfig) -> [RunConfig; 3] {
    let arm = |gpm: bool, ordering: Ordering| {
        let mut c = cfg.clone();
        c.gpm = gpm;
        c.gpm_settings.ordering = ordering;
        c
    };
    [
        arm(false, cfg.gpm_settings.ordering),
        arm(true, Ordering::BottomToTop),
        arm(true, Ordering::TopToBottom),
    ]
}

pub fn ablate(cfg: &RunConfig, data: &DataSplits, out_dir: Option<&Path>, verbose: bool) -> Result<Vec<ArmResult>> {
    ablation_arms(cfg)
        .iter()
        .enumerate()
        .map(|(i, arm)| {
            let dir = out_dir.map(|d| d.join(format!("arm{i}")));
            train_seeds(arm, data, dir.as_deref(), verbose)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "base_channels=2",
            "image_size=16",
            "epochs=1",
            "t_max=1",
            "batch_size=4",
            "seeds=0",
            "synth_count=6",
            "synth_test_count=3",
            "val_fraction=0",
            "augment=false",
        ])
        .unwrap();
        cfg
    }

    #[test]
    fn arms_differ_only_in_gpm_fields() {
        let cfg = tiny();
        let arms = ablation_arms(&cfg);
        assert!(!arms[0].gpm && arms[1].gpm && arms[2].gpm);
        assert_eq!(arms[1].gpm_settings.ordering, Ordering::BottomToTop);
        assert_eq!(arms[2].gpm_settings.ordering, Ordering::TopToBottom);
        for a in &arms {
            let mut b = a.clone();
            b.gpm = cfg.gpm;
            b.gpm_settings = cfg.gpm_settings;
            assert_eq!(b, cfg);
        }
    }

    #[test]
    fn synthetic_data_and_three_rows() {
        let cfg = tiny();
        let data = load_data(&cfg).unwrap();
        assert_eq!(data.train.len(), 6);
        assert!(data.val.is_empty());
        assert_eq!(data.tests[0].1.len(), 3);
        let arms = ablate(&cfg, &data, None, false).unwrap();
        let rows: Vec<_> = arms.iter().flat_map(|a| a.summary_rows()).collect();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].method, "U-Net");
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.dsc)));
    }
}
