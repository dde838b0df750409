//! Patch optimization with Adam while the detector stays frozen.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::applier::{apply_patch_traced, sample_transform, TransformConfig, TransformParams};
use crate::data::{Dataset, LabeledImage};
use crate::detector::{extraction_score, extraction_score_grad, DetectorAdapter, ScoreMode};
use crate::error::{Error, Result};
use crate::fsutil::{sha256_file, write_atomic};
use crate::patch::{
    init_patch, nps_loss_grad, read_block, total_loss, tv_loss_grad, write_block, InitMode, LossBreakdown, LossWeights,
    Patch, PrintableColorSet,
};
use crate::rng::derive_seed;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"APC1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: ScoreMode,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub patch_size: usize,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    pub init: InitMode,
    pub adam: AdamParams,
    pub transform: TransformConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: ScoreMode::Obj,
            weights: LossWeights::default(),
            learning_rate: 0.03,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            patch_size: 300,
            checkpoint_every: 0,
            init: InitMode::Random,
            adam: AdamParams::default(),
            transform: TransformConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::invalid("epochs, batch size and patch size must all be >= 1"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and epsilon must be > 0"));
        }
        self.transform.validate()
    }
}

/// First and second moment estimates, one entry per patch sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub patch: Patch,
    pub adam: AdamState,
    /// Number of optimizer updates applied so far.
    pub step: u64,
}

impl TrainState {
    pub fn new(patch: Patch) -> Self {
        let adam = AdamState::zeros(patch.len());
        Self { patch, adam, step: 0 }
    }

    pub fn initial(config: &TrainConfig) -> Result<Self> {
        let patch = init_patch(config.patch_size, config.patch_size, config.init, config.seed)?;
        Ok(Self::new(patch))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainHistory {
    pub fn csv_header(mode: ScoreMode) -> String {
        format!("# mode={mode}\nstep,nps,tv,obj,total\n")
    }

    pub fn csv_row(r: &StepRecord) -> String {
        format!(
            "{},{},{},{},{}\n",
            r.step, r.loss.nps, r.loss.tv, r.loss.obj, r.loss.total
        )
    }

    pub fn to_csv(&self, mode: ScoreMode) -> String {
        let mut out = Self::csv_header(mode);
        for r in &self.records {
            out.push_str(&Self::csv_row(r));
        }
        out
    }
}

/// Reads the `# mode=` line of a history CSV.
pub fn history_mode(csv: &str) -> Option<ScoreMode> {
    csv.lines().next()?.strip_prefix("# mode=")?.trim().parse().ok()
}

fn to_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Transform draws for every box of one image. They depend only on the seed,
/// the epoch, the batch index and the position of the image and box in it.
pub fn batch_transforms(
    config: &TransformConfig,
    seed: u64,
    epoch: u64,
    batch: u64,
    item: &LabeledImage,
    position: usize,
) -> Vec<TransformParams> {
    (0..item.boxes.len())
        .map(|b| {
            let s = derive_seed(seed, &[epoch, batch, position as u64, b as u64]);
            sample_transform(config, &mut ChaCha8Rng::seed_from_u64(s))
        })
        .collect()
}

/// Mean extraction score over a batch and its gradient with respect to the patch.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    patch: &Patch,
    batch: &[LabeledImage],
    adapter: &dyn DetectorAdapter,
    mode: ScoreMode,
    transform: &TransformConfig,
    seed: u64,
    epoch: u64,
    batch_index: u64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let weight = 1.0 / batch.len() as f64;
    let per_image: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let params = batch_transforms(transform, seed, epoch, batch_index, item, i);
            let (patched, app) = apply_patch_traced(&item.image, patch, &item.bboxes(), &params, transform)?;
            let mut score = 0.0;
            let (_, grad_image) = adapter.forward_backward(&patched, &mut |grid| {
                let (s, g) = extraction_score_grad(grid, mode, weight);
                score = s;
                g
            })?;
            Ok((score, app.backward(&grad_image)?))
        })
        .collect();
    let mut obj = 0.0;
    let mut grad = vec![0.0; patch.len()];
    for r in per_image {
        let (s, g) = r?;
        obj += s * weight;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((obj, grad))
}

fn check_finite(step: u64, term: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, term, value })
    }
}

/// One Adam update on the patch from a single batch. Returns the loss
/// evaluated before the update.
pub fn step(
    state: &mut TrainState,
    batch: &[LabeledImage],
    adapter: &dyn DetectorAdapter,
    config: &TrainConfig,
    colors: &PrintableColorSet,
    epoch: u64,
    batch_index: u64,
) -> Result<LossBreakdown> {
    let at = state.step + 1;
    let (obj, mut grad) = batch_objective(
        &state.patch,
        batch,
        adapter,
        config.mode,
        &config.transform,
        config.seed,
        epoch,
        batch_index,
    )?;
    let (nps, nps_grad) = nps_loss_grad(&state.patch, colors);
    let (tv, tv_grad) = tv_loss_grad(&state.patch);
    let loss = total_loss(nps, tv, obj, config.weights);
    check_finite(at, "nps", nps)?;
    check_finite(at, "tv", tv)?;
    check_finite(at, "obj", obj)?;
    check_finite(at, "total", loss.total)?;

    let (alpha, beta) = (config.weights.alpha, config.weights.beta);
    for ((g, n), t) in grad.iter_mut().zip(&nps_grad).zip(&tv_grad) {
        *g += alpha * n + beta * t;
    }
    if let Some(g) = grad.iter().find(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: at,
            term: "gradient",
            value: *g,
        });
    }

    let AdamParams { beta1, beta2, eps } = config.adam;
    let t = at as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let lr = config.learning_rate;
    let adam = &mut state.adam;
    state.patch.update(|p| {
        for (i, g) in grad.iter().enumerate() {
            let m = to_f32(beta1 * adam.m[i] + (1.0 - beta1) * g);
            let v = to_f32(beta2 * adam.v[i] + (1.0 - beta2) * g * g);
            adam.m[i] = m;
            adam.v[i] = v;
            let update = lr * (m / c1) / ((v / c2).sqrt() + eps);
            p[i] = to_f32((p[i] - update).clamp(0.0, 1.0));
        }
    });
    state.step = at;
    Ok(loss)
}

/// Continues training from `state` until `until_step` updates have been
/// applied in total. Step `k` (0-based) uses batch `k mod B` of epoch
/// `k div B`, so resuming from a checkpoint follows the same schedule.
pub fn train_until(
    config: &TrainConfig,
    adapter: &dyn DetectorAdapter,
    dataset: &Dataset,
    colors: &PrintableColorSet,
    state: &mut TrainState,
    until_step: u64,
    on_step: &mut dyn FnMut(&TrainState, &StepRecord) -> Result<()>,
) -> Result<TrainHistory> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if state.adam.m.len() != state.patch.len() || state.adam.v.len() != state.patch.len() {
        return Err(Error::Shape("optimizer moments do not match patch size".into()));
    }
    let batches: Vec<&[LabeledImage]> = dataset.batches(config.batch_size)?.collect();
    let per_epoch = batches.len() as u64;
    let mut history = TrainHistory::default();
    let mut epoch_start = Instant::now();
    while state.step < until_step {
        let k = state.step;
        let (epoch, b) = (k / per_epoch, k % per_epoch);
        let loss = step(state, batches[b as usize], adapter, config, colors, epoch, b)?;
        let record = StepRecord { step: state.step, loss };
        on_step(state, &record)?;
        history.records.push(record);
        if b + 1 == per_epoch || state.step == until_step {
            let secs = epoch_start.elapsed().as_secs_f64();
            info!("epoch {epoch}: {secs:.2}s, last total loss {:.6}", loss.total);
            history.epoch_seconds.push(secs);
            epoch_start = Instant::now();
        }
    }
    Ok(history)
}

/// Total number of optimizer updates in a full run.
pub fn total_steps(config: &TrainConfig, dataset: &Dataset) -> u64 {
    (config.epochs * dataset.num_batches(config.batch_size)) as u64
}

/// Trains a fresh patch for `epochs x batches` steps.
pub fn train(
    config: &TrainConfig,
    adapter: &dyn DetectorAdapter,
    dataset: &Dataset,
    colors: &PrintableColorSet,
) -> Result<(Patch, TrainHistory)> {
    let mut state = TrainState::initial(config)?;
    let until = total_steps(config, dataset);
    let history = train_until(config, adapter, dataset, colors, &mut state, until, &mut |_, _| Ok(()))?;
    Ok((state.patch, history))
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let (h, w) = (state.patch.height(), state.patch.width());
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    write_block(&mut bytes, h, w, state.patch.data());
    write_block(&mut bytes, h, w, &state.adam.m);
    write_block(&mut bytes, h, w, &state.adam.v);
    bytes.extend_from_slice(&state.step.to_le_bytes());
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    match bytes.get(..4) {
        Some(m) if m == CHECKPOINT_MAGIC => {}
        Some(m) => {
            return Err(format(
                0,
                format!("bad magic {:?}, expected \"APC1\"", String::from_utf8_lossy(m)),
            ))
        }
        None => return Err(format(0, format!("file truncated (length {})", bytes.len()))),
    }
    let (patch_block, at) = read_block(&bytes, 4, path)?;
    let patch = patch_block.clone().into_patch(path, 4)?;
    let (m, at_v) = read_block(&bytes, at, path)?;
    let (v, at_step) = read_block(&bytes, at_v, path)?;
    for (block, offset) in [(&m, at), (&v, at_v)] {
        if (block.height, block.width) != (patch.height(), patch.width()) {
            return Err(format(offset, "moment block shape differs from patch".into()));
        }
    }
    let step_bytes = bytes
        .get(at_step..at_step + 8)
        .ok_or_else(|| format(bytes.len(), format!("file truncated (length {})", bytes.len())))?;
    if bytes.len() != at_step + 8 {
        return Err(format(at_step + 8, "trailing bytes after step counter".into()));
    }
    Ok(TrainState {
        patch,
        adam: AdamState { m: m.data, v: v.data },
        step: u64::from_le_bytes(step_bytes.try_into().expect("8 bytes")),
    })
}

/// Provenance written next to a patch sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchManifest {
    pub sidecar: String,
    pub sha256: String,
    pub mode: String,
    pub steps: u64,
    pub seed: u64,
}

/// `<sidecar>.manifest.json`
pub fn manifest_path(sidecar: &Path) -> std::path::PathBuf {
    let mut name = sidecar.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    sidecar.with_file_name(name)
}

/// Writes the sidecar and its manifest.
pub fn save_patch_with_manifest(patch: &Patch, sidecar: &Path, mode: ScoreMode, steps: u64, seed: u64) -> Result<()> {
    patch.save_sidecar(sidecar)?;
    let manifest = PatchManifest {
        sidecar: sidecar
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: sha256_file(sidecar)?,
        mode: mode.name().to_string(),
        steps,
        seed,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.write_all(b"\n").expect("vec write");
    write_atomic(&manifest_path(sidecar), &json)
}

/// Loads a sidecar, checking it against its manifest when one is present.
pub fn load_verified_patch(sidecar: &Path) -> Result<Patch> {
    let mpath = manifest_path(sidecar);
    if mpath.is_file() {
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: PatchManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: mpath.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let found = sha256_file(sidecar)?;
        if found != manifest.sha256 {
            return Err(Error::Integrity {
                path: sidecar.to_path_buf(),
                expected: manifest.sha256,
                found,
            });
        }
    }
    Patch::load_sidecar(sidecar)
}

/// Mean extraction score over a dataset with the patch applied under the
/// given per-image transforms (identity when `transform` has no randomness).
pub fn mean_patched_score(
    patch: &Patch,
    dataset: &Dataset,
    adapter: &dyn DetectorAdapter,
    mode: ScoreMode,
    transform: &TransformConfig,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let scores: Vec<Result<f64>> = dataset
        .items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let params = batch_transforms(transform, seed, 0, 0, item, i);
            let patched = crate::applier::apply_patch(&item.image, patch, &item.bboxes(), &params, transform)?;
            Ok(extraction_score(&adapter.forward(&patched)?, mode))
        })
        .collect();
    let mut sum = 0.0;
    for s in scores {
        sum += s?;
    }
    Ok(sum / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::init_patch;

    fn state(h: usize) -> TrainState {
        let mut s = TrainState::new(init_patch(h, h + 1, InitMode::Random, 3).unwrap());
        s.adam
            .m
            .iter_mut()
            .enumerate()
            .for_each(|(i, m)| *m = to_f32(i as f64 * -0.01));
        s.adam
            .v
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = to_f32(i as f64 * 1e-5));
        s.step = 100;
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.apc");
        let s = state(4);
        save_checkpoint(&s, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.step, 100);
        assert_eq!(back, s);
    }

    #[test]
    fn checkpoint_errors_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.apc");
        save_checkpoint(&state(2), &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"APF1");
        fs::write(&path, &bad).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format { offset: 0, message, .. }) => assert!(message.contains("magic")),
            other => panic!("unexpected {other:?}"),
        }

        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn history_header_names_mode() {
        let h = TrainHistory {
            records: vec![StepRecord {
                step: 1,
                loss: total_loss(0.2, 0.4, 0.5, LossWeights::new(0.1, 0.5).unwrap()),
            }],
            epoch_seconds: vec![],
        };
        let csv = h.to_csv(ScoreMode::Cls);
        assert!(csv.starts_with("# mode=CLS\nstep,nps,tv,obj,total\n1,"));
        assert_eq!(history_mode(&csv), Some(ScoreMode::Cls));
        assert!((h.records[0].loss.total - 0.72).abs() < 1e-12);
    }

    #[test]
    fn manifest_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patch.apf");
        let p = init_patch(3, 3, InitMode::Random, 1).unwrap();
        save_patch_with_manifest(&p, &path, ScoreMode::Obj, 5, 1).unwrap();
        assert_eq!(load_verified_patch(&path).unwrap(), p);
        let other = init_patch(3, 3, InitMode::Gray, 1).unwrap();
        other.save_sidecar(&path).unwrap();
        assert!(matches!(load_verified_patch(&path), Err(Error::Integrity { .. })));
    }
}
