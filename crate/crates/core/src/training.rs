//! Training loop, scoring helpers and grouped cross-validation.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{save_weights, FeatureSequence};
use crate::error::{Error, Result};
use crate::metrics::{default_grid, evaluate, EvalReport, ScoredVideo};
use crate::model::{clip_loss, forward, register, ModelConfig, ModelParams};
use crate::numerics::{adam_step, AdamState, Scalar, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Only 1 is supported.
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs between validation passes; 0 disables validation.
    pub eval_every: usize,
    /// Where `final.vagw` (and `best.vagw` with `keep_best`) are written.
    pub checkpoint_dir: Option<PathBuf>,
    /// Also keep the weights with the best validation AP.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-4,
            batch_size: 1,
            seed: 0,
            eval_every: 0,
            checkpoint_dir: None,
            keep_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(Error::config(format!(
                "batch_size must be 1, got {}",
                self.batch_size
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One-hot per-frame targets: every frame takes the clip's label.
pub fn frame_labels<S: Scalar>(clip: &FeatureSequence) -> Result<Tensor<S>> {
    if clip.label > 1 {
        return Err(Error::input(format!("label must be 0 or 1, got {}", clip.label)));
    }
    let row = if clip.label == 1 { [S::zero(), S::one()] } else { [S::one(), S::zero()] };
    Tensor::new(vec![clip.frames(), 2], row.repeat(clip.frames()))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mtta: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| Error::input(format!("bad log line {l:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { epochs })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub log: TrainLog,
    /// Optimizer steps taken.
    pub steps: u64,
}

fn clip_id(clip: &FeatureSequence, index: usize) -> String {
    format!("{}#{index}", clip.group_id)
}

/// Loss of one clip and the gradient of every parameter, in tree order.
pub fn loss_and_grads<S: Scalar>(
    params: &ModelParams<S>,
    clip: &Tensor<S>,
    labels: &Tensor<S>,
) -> Result<(f64, Vec<Tensor<S>>)> {
    let mut tape = Tape::new();
    let p = register(&mut tape, params, true)?;
    let x = tape.param(Arc::new(clip.clone()), false)?;
    let loss = clip_loss(&mut tape, &p, &params.config, x, labels)?;
    let value = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
    let mut grads = tape.backward(loss)?;
    let grads = p
        .leaves()
        .into_iter()
        .map(|&v| grads.take(v).ok_or_else(|| Error::dim("missing parameter gradient")))
        .collect::<Result<_>>()?;
    Ok((value, grads))
}

/// Trains with Adam, one step per clip, clips reshuffled every epoch.
///
/// `val` is scored every `eval_every` epochs when given.
pub fn train(
    mut params: ModelParams<f32>,
    clips: &[FeatureSequence],
    val: Option<&[FeatureSequence]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if clips.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    if let Some(c) = clips.iter().find(|c| c.dim() != params.config.input_dim) {
        return Err(Error::dim(format!(
            "clip {} has feature dim {}, model expects {}",
            c.group_id,
            c.dim(),
            params.config.input_dim
        )));
    }
    let labels: Vec<Tensor<f32>> = clips.iter().map(frame_labels).collect::<Result<_>>()?;
    let shapes: Vec<Vec<usize>> = params.tree.leaves().iter().map(|t| t.shape().to_vec()).collect();
    let mut adam = AdamState::<f32>::new(config.lr, shapes.iter().map(Vec::as_slice));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut log = TrainLog::default();
    let mut best_ap = f64::NEG_INFINITY;
    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let tag = |e: Error| match e {
                Error::NumericFailure(m) => {
                    Error::NumericFailure(format!("clip {}: {m}", clip_id(&clips[i], i)))
                }
                other => other,
            };
            let (loss, grads) =
                loss_and_grads(&params, &clips[i].features, &labels[i]).map_err(tag)?;
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            let mut leaves: Vec<&mut Tensor<f32>> =
                params.tree.leaves_mut().into_iter().map(Arc::make_mut).collect();
            adam_step(&mut leaves, &grad_refs, &mut adam)?;
            if let Some(bad) = leaves.iter().position(|t| !t.is_finite()) {
                return Err(tag(Error::NumericFailure(format!(
                    "parameter {bad} became non-finite"
                ))));
            }
            total += loss;
        }
        let mut record = EpochRecord {
            epoch,
            mean_loss: total / clips.len() as f64,
            steps: adam.step_count(),
            val_ap: None,
            val_mtta: None,
        };
        if let Some(val) = val.filter(|_| config.eval_every > 0 && epoch % config.eval_every == 0) {
            let report = evaluate_clips(&params, val)?;
            record.val_ap = Some(report.ap);
            record.val_mtta = Some(report.mtta);
            if config.keep_best && report.ap > best_ap {
                best_ap = report.ap;
                if let Some(dir) = &config.checkpoint_dir {
                    save_weights(&params, dir.join("best.vagw"))?;
                }
            }
        }
        log::info!("epoch {epoch}: mean loss {:.6}", record.mean_loss);
        log.epochs.push(record);
    }
    if let Some(dir) = &config.checkpoint_dir {
        save_weights(&params, dir.join("final.vagw"))?;
        log.write(dir.join("train_log.jsonl"))?;
    }
    Ok(TrainOutcome {
        params,
        log,
        steps: adam.step_count(),
    })
}

/// Runs the model over every clip.
pub fn score_clips(params: &ModelParams<f32>, clips: &[FeatureSequence]) -> Result<Vec<ScoredVideo>> {
    clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if c.dim() != params.config.input_dim {
                return Err(Error::dim(format!(
                    "clip {} has feature dim {}, checkpoint expects {}",
                    clip_id(c, i),
                    c.dim(),
                    params.config.input_dim
                )));
            }
            let trace = forward(params, &c.features)?;
            ScoredVideo::new(trace.probs, c.label, c.tau, c.fps as f64)
        })
        .collect()
}

/// Scores `clips` and evaluates on the default threshold grid.
pub fn evaluate_clips(params: &ModelParams<f32>, clips: &[FeatureSequence]) -> Result<EvalReport> {
    evaluate(&score_clips(params, clips)?, &default_grid())
}

/// Partitions clip indices into `k` folds so that no group spans two folds.
///
/// Groups are taken in first-appearance order, shuffled with `seed` and dealt
/// round-robin, so fold sizes (in groups) differ by at most one.
pub fn group_folds<S: AsRef<str>>(groups: &[S], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {k}")));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut unique: Vec<&str> = Vec::new();
    for g in groups {
        let g = g.as_ref();
        if !index.contains_key(g) {
            index.insert(g, unique.len());
            unique.push(g);
        }
    }
    if unique.len() < k {
        return Err(Error::input(format!(
            "{} groups cannot fill {k} folds",
            unique.len()
        )));
    }
    let mut perm: Vec<usize> = (0..unique.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; unique.len()];
    for (slot, &g) in perm.iter().enumerate() {
        fold_of[g] = slot % k;
    }
    let mut folds = vec![Vec::new(); k];
    for (i, g) in groups.iter().enumerate() {
        folds[fold_of[index[g.as_ref()]]].push(i);
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_groups: Vec<String>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub mean_ap: f64,
    pub mean_mtta: f64,
}

/// Grouped k-fold: train a fresh model on k-1 folds, evaluate on the rest.
pub fn run_cross_validation(
    clips: &[FeatureSequence],
    k: usize,
    model: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<CrossValidation> {
    let groups: Vec<&str> = clips.iter().map(|c| c.group_id.as_str()).collect();
    let folds = group_folds(&groups, k, train_config.seed)?;
    let mut results = Vec::with_capacity(k);
    for (f, test_idx) in folds.iter().enumerate() {
        let test: Vec<FeatureSequence> = test_idx.iter().map(|&i| clips[i].clone()).collect();
        let train_set: Vec<FeatureSequence> = (0..clips.len())
            .filter(|i| !test_idx.contains(i))
            .map(|i| clips[i].clone())
            .collect();
        let params = ModelParams::init(model, train_config.seed)?;
        let config = TrainConfig {
            checkpoint_dir: train_config.checkpoint_dir.as_ref().map(|d| d.join(format!("fold_{f}"))),
            ..train_config.clone()
        };
        let outcome = train(params, &train_set, None, &config)?;
        let report = evaluate_clips(&outcome.params, &test)?;
        let mut test_groups: Vec<String> = test.iter().map(|c| c.group_id.clone()).collect();
        test_groups.dedup();
        results.push(FoldResult {
            fold: f,
            test_groups,
            report,
        });
    }
    let n = results.len() as f64;
    Ok(CrossValidation {
        mean_ap: results.iter().map(|r| r.report.ap).sum::<f64>() / n,
        mean_mtta: results.iter().map(|r| r.report.mtta).sum::<f64>() / n,
        folds: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_generate, SyntheticSpec};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn tiny_model(input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            d_model: 8,
            layers: 1,
            heads: 2,
            lookback: 3,
            graph_neighbors: 4,
            hidden_dim: 8,
            ..Default::default()
        }
    }

    fn tiny_data(n: usize, seed: u64) -> Vec<FeatureSequence> {
        synth_generate(&SyntheticSpec {
            n_clips: n,
            dim: 6,
            frames: 20,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn labels_follow_clip_label() {
        let clips = tiny_data(2, 0);
        let pos: Tensor<f32> = frame_labels(&clips[0]).unwrap();
        let neg: Tensor<f32> = frame_labels(&clips[1]).unwrap();
        assert_eq!(pos.shape(), &[20, 2]);
        for t in 0..20 {
            assert_eq!(pos.row(t), &[0.0, 1.0]);
            assert_eq!(neg.row(t), &[1.0, 0.0]);
        }
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let clips = tiny_data(2, 1);
        let params = ModelParams::init(&tiny_model(6), 3).unwrap();
        let labels = frame_labels(&clips[0]).unwrap();
        let (initial, _) = loss_and_grads(&params, &clips[0].features, &labels).unwrap();
        let config = TrainConfig { epochs: 1, lr: 0.0, ..Default::default() };
        let out = train(params.clone(), &clips[..1], None, &config).unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.log.epochs[0].mean_loss, initial);
    }

    #[test]
    fn one_step_per_clip_per_epoch() {
        let clips = tiny_data(6, 2);
        let config = TrainConfig { epochs: 3, ..Default::default() };
        let out = train(ModelParams::init(&tiny_model(6), 0).unwrap(), &clips, None, &config).unwrap();
        assert_eq!(out.steps, 18);
        assert_eq!(out.log.epochs.iter().map(|r| r.steps).collect::<Vec<_>>(), vec![6, 12, 18]);
    }

    #[test]
    fn same_seed_same_run() {
        let clips = tiny_data(4, 3);
        let config = TrainConfig { epochs: 2, lr: 1e-3, seed: 9, ..Default::default() };
        let run = || train(ModelParams::init(&tiny_model(6), 1).unwrap(), &clips, None, &config).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        let other = TrainConfig { seed: 10, ..config.clone() };
        let c = train(ModelParams::init(&tiny_model(6), 1).unwrap(), &clips, None, &other).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn loss_goes_down_on_separable_data() {
        let clips = tiny_data(20, 4);
        let config = TrainConfig { epochs: 6, lr: 1e-3, ..Default::default() };
        let out = train(ModelParams::init(&tiny_model(6), 0).unwrap(), &clips, None, &config).unwrap();
        let first = out.log.epochs.first().unwrap().mean_loss;
        let last = out.log.epochs.last().unwrap().mean_loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn numeric_failure_names_the_clip() {
        let clips = tiny_data(2, 5);
        let mut params = ModelParams::init(&tiny_model(6), 0).unwrap();
        params
            .get_mut("proj.weight")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = 3e38);
        let err = train(params, &clips[..1], None, &TrainConfig { epochs: 1, ..Default::default() })
            .err()
            .unwrap();
        assert!(err.is_numeric(), "{err}");
        assert!(err.to_string().contains(&clips[0].group_id), "{err}");
    }

    #[test]
    fn wrong_batch_size_is_rejected() {
        let config = TrainConfig { batch_size: 4, ..Default::default() };
        let params = ModelParams::init(&tiny_model(6), 0).unwrap();
        assert!(matches!(train(params, &tiny_data(2, 0), None, &config), Err(Error::Config(_))));
    }

    #[test]
    fn log_round_trips_as_lines() {
        let log = TrainLog {
            epochs: vec![
                EpochRecord { epoch: 1, mean_loss: 0.7, steps: 4, val_ap: None, val_mtta: None },
                EpochRecord { epoch: 2, mean_loss: 0.6, steps: 8, val_ap: Some(0.9), val_mtta: Some(1.5) },
            ],
        };
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(TrainLog::from_jsonl(&text).unwrap(), log);
    }

    #[test]
    fn checkpoints_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let clips = tiny_data(4, 6);
        let config = TrainConfig {
            epochs: 2,
            eval_every: 1,
            keep_best: true,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let out = train(ModelParams::init(&tiny_model(6), 0).unwrap(), &clips, Some(&clips), &config).unwrap();
        assert!(out.log.epochs.iter().all(|r| r.val_ap.is_some()));
        assert!(dir.path().join("final.vagw").is_file());
        assert!(dir.path().join("best.vagw").is_file());
        let logged = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(TrainLog::from_jsonl(&logged).unwrap(), out.log);
    }

    #[test]
    fn ten_groups_five_folds() {
        let groups: Vec<String> = (0..30).map(|i| format!("g{}", i % 10)).collect();
        let folds = group_folds(&groups, 5, 0).unwrap();
        for fold in &folds {
            let gs: HashSet<&str> = fold.iter().map(|&i| groups[i].as_str()).collect();
            assert_eq!(gs.len(), 2);
            assert_eq!(fold.len(), 6);
        }
    }

    #[test]
    fn too_few_groups() {
        assert!(matches!(group_folds(&["a", "b"], 3, 0), Err(Error::Input(_))));
        assert!(matches!(group_folds(&["a", "b"], 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn cross_validation_aggregates_fold_means() {
        let clips = tiny_data(8, 7);
        let config = TrainConfig { epochs: 1, lr: 1e-3, ..Default::default() };
        let cv = run_cross_validation(&clips, 2, &tiny_model(6), &config).unwrap();
        assert_eq!(cv.folds.len(), 2);
        let ap = (cv.folds[0].report.ap + cv.folds[1].report.ap) / 2.0;
        let mtta = (cv.folds[0].report.mtta + cv.folds[1].report.mtta) / 2.0;
        assert_eq!(cv.mean_ap, ap);
        assert_eq!(cv.mean_mtta, mtta);
        let a: HashSet<_> = cv.folds[0].test_groups.iter().collect();
        assert!(cv.folds[1].test_groups.iter().all(|g| !a.contains(g)));
    }

    proptest! {
        #[test]
        fn folds_partition_groups(
            assignment in proptest::collection::vec(0usize..40, 5..200),
            k in 2usize..6,
            seed in any::<u64>(),
        ) {
            let groups: Vec<String> = assignment.iter().map(|g| format!("v{g}")).collect();
            let unique: HashSet<&String> = groups.iter().collect();
            prop_assume!(unique.len() >= k);
            let folds = group_folds(&groups, k, seed).unwrap();
            let mut seen = vec![false; groups.len()];
            let mut owner: HashMap<&str, usize> = HashMap::new();
            for (f, fold) in folds.iter().enumerate() {
                for &i in fold {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                    let prev = *owner.entry(groups[i].as_str()).or_insert(f);
                    prop_assert_eq!(prev, f);
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
            let per_fold: Vec<usize> = (0..k)
                .map(|f| owner.values().filter(|&&o| o == f).count())
                .collect();
            let (lo, hi) = (per_fold.iter().min().unwrap(), per_fold.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
    }
}
