//! Ablations on synthetic block-model data: pretrained versus scratch
//! tables, frozen versus fine-tuned tables, INT4 serving tables, and the
//! effect of a time gap between pretraining and fine-tuning data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::contrastive::contrastive_pretrain;
use super::finetune::{evaluate_auc, finetune, FinetuneConfig, LabeledExample};
use super::synth::{BlockWorld, TimedExample, WorldConfig};
use super::{InteractionRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::quant::quantize_int4;
use crate::tables::splitmix64_mix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub world: WorldConfig,
    pub pretrain_interactions: usize,
    pub finetune_examples: usize,
    pub eval_examples: usize,
    /// Table shape for every arm comes from here.
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub quant_group_size: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            pretrain_interactions: 15_000,
            finetune_examples: 12_000,
            eval_examples: 6_000,
            pretrain: TrainConfig {
                dim: 16,
                num_rows: 4096,
                learning_rate: 0.5,
                batch_size: 64,
                epochs: 5,
                num_out_batch_negatives: 16,
                ..TrainConfig::default()
            },
            finetune: FinetuneConfig {
                dim: 16,
                num_rows: 4096,
                learning_rate: 1.0,
                table_learning_rate: 0.1,
                batch_size: 32,
                epochs: 5,
                ..FinetuneConfig::default()
            },
            quant_group_size: 8,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.pretrain_interactions == 0 || self.finetune_examples == 0 || self.eval_examples == 0 {
            return Err(Error::invalid("benchmark data sizes must be positive"));
        }
        Ok(())
    }

    fn finetune_for(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            dim: self.pretrain.dim,
            num_rows: self.pretrain.num_rows,
            seed,
            ..self.finetune.clone()
        }
    }
}

/// Held-out AUC of each arm for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub seed: u64,
    pub auc_scratch: f64,
    pub auc_finetuned: f64,
    pub auc_frozen: f64,
    /// The fine-tuned model served from INT4 copies of its tables.
    pub auc_finetuned_int4: f64,
    /// The frozen arm handed back its pretrained tables bit for bit.
    pub frozen_tables_unchanged: bool,
}

impl BenchmarkResult {
    pub fn gain(&self) -> f64 {
        self.auc_finetuned - self.auc_scratch
    }
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    splitmix64_mix(seed ^ splitmix64_mix(stream))
}

/// AUC gain of pretrained-then-fine-tuned tables over scratch tables, both
/// fine-tuned on `train` and scored on `eval`.
pub fn benchmark_gain(
    pretrain_data: &[InteractionRecord],
    train: &[LabeledExample],
    eval: &[LabeledExample],
    config: &BenchmarkConfig,
    seed: u64,
) -> Result<f64> {
    let arms = run_arms(pretrain_data, train, eval, config, seed, false)?;
    Ok(arms.auc_finetuned - arms.auc_scratch)
}

fn run_arms(
    pretrain_data: &[InteractionRecord],
    train: &[LabeledExample],
    eval: &[LabeledExample],
    config: &BenchmarkConfig,
    seed: u64,
    all_arms: bool,
) -> Result<BenchmarkResult> {
    let pre_cfg = TrainConfig {
        seed: sub_seed(seed, 2),
        ..config.pretrain.clone()
    };
    let (users, pins) = contrastive_pretrain(pretrain_data, &pre_cfg)?;
    let ft_cfg = config.finetune_for(sub_seed(seed, 3));

    let (scratch, su, sp) = finetune(train, None, false, &ft_cfg)?;
    let auc_scratch = evaluate_auc(&scratch, &su, &sp, eval)?;
    let (tuned, tu, tp) = finetune(train, Some((&users, &pins)), false, &ft_cfg)?;
    let auc_finetuned = evaluate_auc(&tuned, &tu, &tp, eval)?;

    let (auc_frozen, auc_finetuned_int4, frozen_tables_unchanged) = if all_arms {
        let (frozen, fu, fp) = finetune(train, Some((&users, &pins)), true, &ft_cfg)?;
        let unchanged = fu.to_f32_vec() == users.to_f32_vec() && fp.to_f32_vec() == pins.to_f32_vec();
        let qu = quantize_int4(&tu, config.quant_group_size)?;
        let qp = quantize_int4(&tp, config.quant_group_size)?;
        (
            evaluate_auc(&frozen, &fu, &fp, eval)?,
            evaluate_auc(&tuned, qu.table(), qp.table(), eval)?,
            unchanged,
        )
    } else {
        (f64::NAN, f64::NAN, true)
    };
    Ok(BenchmarkResult {
        seed,
        auc_scratch,
        auc_finetuned,
        auc_frozen,
        auc_finetuned_int4,
        frozen_tables_unchanged,
    })
}

/// Generates a static block world from `seed` and evaluates all arms.
pub fn run_benchmark(config: &BenchmarkConfig, seed: u64) -> Result<BenchmarkResult> {
    config.validate()?;
    let world = BlockWorld::generate(&config.world, sub_seed(seed, 0))?;
    let interactions = world.interactions(config.pretrain_interactions, 0, 1, sub_seed(seed, 1))?;
    let labeled = world.labeled(config.finetune_examples + config.eval_examples, sub_seed(seed, 4))?;
    let (train, eval) = labeled.split_at(config.finetune_examples);
    run_arms(&interactions, train, eval, config, seed, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub seeds: usize,
    pub mean_auc_scratch: f64,
    pub mean_auc_finetuned: f64,
    pub mean_auc_frozen: f64,
    pub mean_auc_finetuned_int4: f64,
    pub mean_gain: f64,
    /// Seeds where the pretrained arm beats scratch.
    pub pretrained_wins: usize,
    /// Seeds where fine-tuning is at least as good as freezing.
    pub finetune_not_worse: usize,
    pub max_int4_abs_delta: f64,
    pub freeze_contract_violations: usize,
    pub results: Vec<BenchmarkResult>,
}

/// Runs `run_benchmark` for every seed (in parallel) and aggregates.
pub fn run_benchmark_seeds(config: &BenchmarkConfig, seeds: std::ops::Range<u64>) -> Result<BenchmarkSummary> {
    let results: Vec<BenchmarkResult> = seeds
        .into_par_iter()
        .map(|s| run_benchmark(config, s))
        .collect::<Result<_>>()?;
    if results.is_empty() {
        return Err(Error::invalid("no seeds"));
    }
    let n = results.len() as f64;
    let mean = |f: fn(&BenchmarkResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    Ok(BenchmarkSummary {
        seeds: results.len(),
        mean_auc_scratch: mean(|r| r.auc_scratch),
        mean_auc_finetuned: mean(|r| r.auc_finetuned),
        mean_auc_frozen: mean(|r| r.auc_frozen),
        mean_auc_finetuned_int4: mean(|r| r.auc_finetuned_int4),
        mean_gain: mean(BenchmarkResult::gain),
        pretrained_wins: results.iter().filter(|r| r.auc_finetuned > r.auc_scratch).count(),
        finetune_not_worse: results.iter().filter(|r| r.auc_finetuned >= r.auc_frozen).count(),
        max_int4_abs_delta: results
            .iter()
            .map(|r| (r.auc_finetuned_int4 - r.auc_finetuned).abs())
            .fold(0.0, f64::max),
        freeze_contract_violations: results.iter().filter(|r| !r.frozen_tables_unchanged).count(),
        results,
    })
}

/// Time layout of the drifting stream, in seconds. The stream covers
/// `[0, stream_windows * window)`; fine-tuning uses the last window and
/// community switches happen uniformly in `[window, (stream_windows - 1) * window)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StalenessConfig {
    pub benchmark: BenchmarkConfig,
    pub window: u64,
    pub stream_windows: u64,
    /// Gaps to evaluate; an empty list means `[0, max_gap / 4, max_gap]`.
    pub gaps: Vec<i64>,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for StalenessConfig {
    fn default() -> Self {
        Self {
            benchmark: BenchmarkConfig::default(),
            window: 86_400 * 30,
            stream_windows: 10,
            gaps: Vec::new(),
            repeats: 8,
            seed: 0,
        }
    }
}

impl StalenessConfig {
    /// Start of the fine-tuning window.
    pub fn finetune_start(&self) -> u64 {
        (self.stream_windows - 1) * self.window
    }

    /// Largest gap whose pretraining window still starts at or after 0.
    pub fn max_gap(&self) -> i64 {
        (self.finetune_start() - self.window) as i64
    }

    pub fn effective_gaps(&self) -> Vec<i64> {
        if self.gaps.is_empty() {
            let full = self.max_gap();
            vec![0, full / 4, full]
        } else {
            self.gaps.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        if self.window == 0 || self.stream_windows < 3 {
            return Err(Error::invalid("need a positive window and at least 3 windows"));
        }
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be positive"));
        }
        Ok(())
    }
}

/// One drifting world with its full interaction log before the fine-tuning
/// window and the labeled impressions inside it.
#[derive(Debug, Clone)]
pub struct DriftStream {
    pub world: BlockWorld,
    pub interactions: Vec<InteractionRecord>,
    pub impressions: Vec<TimedExample>,
}

pub fn drifting_stream(config: &StalenessConfig, seed: u64) -> Result<DriftStream> {
    config.validate()?;
    let (w, t) = (config.window, config.finetune_start());
    let b = &config.benchmark;
    let world = BlockWorld::drifting(&b.world, sub_seed(seed, 0), w, t)?;
    let windows = (t / w) as usize;
    let interactions = world.interactions(b.pretrain_interactions * windows, 0, t, sub_seed(seed, 1))?;
    let impressions = world.impressions(b.finetune_examples + b.eval_examples, t, t + w, sub_seed(seed, 4))?;
    Ok(DriftStream {
        world,
        interactions,
        impressions,
    })
}

/// Pretrains on `[T - gap - window, T - gap)`, fine-tunes on the first
/// `finetune_examples` impressions of `[T, T + window)` and reports the AUC
/// gain over scratch on the remaining, later impressions.
pub fn staleness_gain(stream: &DriftStream, gap: i64, config: &StalenessConfig, seed: u64) -> Result<f64> {
    config.validate()?;
    let t = config.finetune_start() as i64;
    let w = config.window as i64;
    if gap < 0 {
        return Err(Error::invalid(format!("gap {gap} makes the pretraining and fine-tuning windows overlap")));
    }
    let (end, start) = (t - gap, t - gap - w);
    if start < 0 {
        return Err(Error::invalid(format!(
            "gap {gap} puts the pretraining window before the stream start (max gap {})",
            config.max_gap()
        )));
    }
    let pretrain: Vec<InteractionRecord> = stream
        .interactions
        .iter()
        .filter(|r| (start..end).contains(&(r.timestamp as i64)))
        .copied()
        .collect();
    let labeled: Vec<LabeledExample> = stream.impressions.iter().map(|t| t.example.clone()).collect();
    let (train, eval) = labeled.split_at(config.benchmark.finetune_examples.min(labeled.len()));
    benchmark_gain(&pretrain, train, eval, &config.benchmark, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub gap: i64,
    /// Mean over repeats.
    pub auc_gain: f64,
    pub gains: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StalenessResult {
    pub gaps: Vec<GapResult>,
}

/// Evaluates every gap on `repeats` independent streams; all gaps of one
/// repeat share the stream so their gains are paired.
pub fn staleness_experiment(config: &StalenessConfig) -> Result<StalenessResult> {
    config.validate()?;
    let gaps = config.effective_gaps();
    let per_repeat: Vec<Vec<f64>> = (0..config.repeats as u64)
        .into_par_iter()
        .map(|r| {
            let seed = sub_seed(config.seed, 100 + r);
            let stream = drifting_stream(config, seed)?;
            gaps.iter().map(|&g| staleness_gain(&stream, g, config, seed)).collect()
        })
        .collect::<Result<_>>()?;
    Ok(StalenessResult {
        gaps: gaps
            .iter()
            .enumerate()
            .map(|(i, &gap)| {
                let gains: Vec<f64> = per_repeat.iter().map(|r| r[i]).collect();
                GapResult {
                    gap,
                    auc_gain: gains.iter().sum::<f64>() / gains.len() as f64,
                    gains,
                }
            })
            .collect(),
    })
}
