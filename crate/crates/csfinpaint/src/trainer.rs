//! Self-supervised adversarial training: cross-validation splits, MONAI-style
//! augmentation, the alternating D/G loop, and fine-tuning on unseen cohorts.
//!
//! Reproducibility contract: with a fixed seed every run draws identical
//! masks, noise, crops, and updates, so loss curves match bitwise.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::channels::{assemble_channels, ChannelStack, SEMANTIC_CHANNELS};
use crate::dropout::{apply_noise_fill, make_mtis, DropoutMask};
use crate::edges::CannyConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, PyramidConfig};
use crate::losses::{
    adv_d_loss_t, adv_g_loss_t, feature_losses_t, recon_loss_t, total_loss, LossWeights,
};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::networks::{
    composite, composite_t, generator_forward, BundleMeta, DiscriminatorSpec, GeneratorSpec,
    ModelBundle,
};
use crate::rng::RngStream;
use crate::spe::SpeConfig;
use crate::tensor::{no_grad, zero_grads, Adam, Tensor};
use crate::volume::{Modality, TissueLabelVolume, Volume};

/// Which feature pyramid backs the perceptual/style losses.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum ExtractorChoice {
    /// Two-stage random pyramid; fast, used for desk-scale runs and tests.
    Toy { seed: u64 },
    /// VGG-19 architecture with seeded random weights (no pretrained file).
    Vgg19Seeded { seed: u64 },
    /// Pinned weight artifact directory (e.g. converted VGG-19 weights).
    File { path: std::path::PathBuf },
}

impl Default for ExtractorChoice {
    fn default() -> Self {
        ExtractorChoice::Toy { seed: 0 }
    }
}

impl ExtractorChoice {
    pub fn build(&self) -> Result<FeatureExtractor> {
        match self {
            ExtractorChoice::Toy { seed } => Ok(FeatureExtractor::toy(*seed)),
            ExtractorChoice::Vgg19Seeded { seed } => {
                FeatureExtractor::seeded(PyramidConfig::vgg19(), *seed)
            }
            ExtractorChoice::File { path } => FeatureExtractor::load(path),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Learning rate holds until this epoch, then decays linearly to zero.
    pub decay_start_epoch: usize,
    pub total_epochs: usize,
    pub crop_size: usize,
    pub crops_per_sample: usize,
    pub masks_per_sample: usize,
    pub finetune_masks_per_sample: usize,
    pub flip_probability: f64,
    pub rot90_probability: f64,
    pub rot90_max_k: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub spe: SpeConfig,
    pub canny: CannyConfig,
    pub extractor: ExtractorChoice,
    /// Optional hard cap on optimizer iterations (smoke tests).
    pub max_iterations: Option<usize>,
    /// Stop early once validation masked L1 falls below this value.
    pub target_val_l1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            decay_start_epoch: 80,
            total_epochs: 200,
            crop_size: 48,
            crops_per_sample: 4,
            masks_per_sample: 5,
            finetune_masks_per_sample: 20,
            flip_probability: 0.1,
            rot90_probability: 0.1,
            rot90_max_k: 3,
            weights: LossWeights::default(),
            seed: 0,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            spe: SpeConfig::default(),
            canny: CannyConfig::default(),
            extractor: ExtractorChoice::default(),
            max_iterations: None,
            target_val_l1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::InvalidArgument("total_epochs must be positive".into()));
        }
        if self.decay_start_epoch > self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "decay_start_epoch {} exceeds total_epochs {}",
                self.decay_start_epoch, self.total_epochs
            )));
        }
        if self.batch_size == 0 || self.crops_per_sample == 0 || self.masks_per_sample == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, crops_per_sample, masks_per_sample must be positive".into(),
            ));
        }
        let m = self.generator.spatial_multiple();
        if self.crop_size % m != 0 || self.crop_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop_size {} must be a positive multiple of {m}",
                self.crop_size
            )));
        }
        if self.crop_size < self.discriminator.min_input_extent() {
            return Err(Error::InvalidArgument(format!(
                "crop_size {} below discriminator minimum {}",
                self.crop_size,
                self.discriminator.min_input_extent()
            )));
        }
        self.weights.validate()?;
        self.spe.validate()?;
        self.generator.validate()?;
        Ok(())
    }

    /// Generator input width: the five semantic channels plus the encoding.
    pub fn input_channels(&self) -> usize {
        SEMANTIC_CHANNELS + self.spe.n_channels()
    }
}

/// One training sample: a co-registered image pair with labels and its
/// pre-generated dropout masks.
pub struct TrainSample {
    pub subject: String,
    pub sample: String,
    pub t1: Volume,
    pub flair: Volume,
    pub tis: TissueLabelVolume,
    pub masks: Vec<DropoutMask>,
}

/// Total dropout masks a dataset contributes to one model.
pub fn total_mask_count(data: &[TrainSample]) -> usize {
    data.iter().map(|s| s.masks.len()).sum()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
}

impl FoldSplit {
    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<&String> = self.train_subjects.iter().collect();
        let val: BTreeSet<&String> = self.val_subjects.iter().collect();
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidArgument(
                "fold needs nonempty train and validation subject sets".into(),
            ));
        }
        let overlap: Vec<&&String> = train.intersection(&val).collect();
        if !overlap.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "subject-level leakage: {overlap:?} in both train and validation"
            )));
        }
        Ok(())
    }
}

/// Standard K-fold partition at the subject level. Test-retest samples share
/// their subject id, so co-assignment is automatic.
pub fn make_folds(subjects: &[String], n_folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    let unique: BTreeSet<String> = subjects.iter().cloned().collect();
    let mut ids: Vec<String> = unique.into_iter().collect();
    if n_folds == 0 || ids.len() < n_folds || n_folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot make {n_folds} folds from {} subjects",
            ids.len()
        )));
    }
    let mut rng = RngStream::new(seed).derive("folds");
    rng.shuffle(&mut ids);
    let base = ids.len() / n_folds;
    let extra = ids.len() % n_folds;
    let mut folds = Vec::with_capacity(n_folds);
    let mut cursor = 0usize;
    for f in 0..n_folds {
        let size = base + usize::from(f < extra);
        let val: Vec<String> = ids[cursor..cursor + size].to_vec();
        let train: Vec<String> = ids
            .iter()
            .filter(|s| !val.contains(s))
            .cloned()
            .collect();
        cursor += size;
        let split = FoldSplit {
            fold_index: f,
            train_subjects: train,
            val_subjects: val,
        };
        split.validate()?;
        folds.push(split);
    }
    Ok(folds)
}

/// Scheduled learning rate: constant, then linear decay to zero at the final
/// epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < self_decay_start(cfg) {
        cfg.learning_rate
    } else {
        let total = cfg.total_epochs as f64;
        let start = self_decay_start(cfg) as f64;
        cfg.learning_rate * (total - epoch as f64) / (total - start).max(1.0)
    }
}

fn self_decay_start(cfg: &TrainConfig) -> usize {
    cfg.decay_start_epoch.min(cfg.total_epochs)
}

/// One augmented crop: the input stack plus aligned target and mask.
#[derive(Debug)]
pub struct TrainingCrop {
    pub channels: Array4<f64>,
    pub target: Array3<f64>,
    pub mask: Array3<f64>,
    pub tis_channel: Array3<f64>,
}

pub struct AugmentConfig {
    pub crop_size: usize,
    pub crops_per_sample: usize,
    pub flip_probability: f64,
    pub rot90_probability: f64,
    pub rot90_max_k: usize,
}

impl AugmentConfig {
    fn from_train(cfg: &TrainConfig) -> Self {
        AugmentConfig {
            crop_size: cfg.crop_size,
            crops_per_sample: cfg.crops_per_sample,
            flip_probability: cfg.flip_probability,
            rot90_probability: cfg.rot90_probability,
            rot90_max_k: cfg.rot90_max_k,
        }
    }
}

/// Foreground-crop, then cut crops centered on random mask-positive voxels,
/// then random flips and a random 90-degree rotation, applied jointly to all
/// channels, the target, and the mask.
pub fn augment(
    stack: &ChannelStack,
    target: &Volume,
    mask: &DropoutMask,
    cfg: &AugmentConfig,
    rng: &mut RngStream,
) -> Result<Vec<TrainingCrop>> {
    let shape = stack.spatial_shape();
    if target.shape() != shape || mask.shape() != shape {
        return Err(Error::shape_mismatch(
            "augment stack vs target/mask",
            &shape,
            &target.shape(),
        ));
    }

    // foreground bounding box of the target image
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for ((i, j, k), &v) in target.data.indexed_iter() {
        if v != 0.0 {
            let idx = [i, j, k];
            for a in 0..3 {
                lo[a] = lo[a].min(idx[a]);
                hi[a] = hi[a].max(idx[a] + 1);
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(Error::InvalidArgument(
            "augment: target has no foreground".into(),
        ));
    }
    let size = cfg.crop_size;
    for a in 0..3 {
        if hi[a] - lo[a] < size {
            return Err(Error::InvalidArgument(format!(
                "sample extent {} after foreground crop is below crop size {size}",
                hi[a] - lo[a]
            )));
        }
    }

    let fg_channels = stack
        .channels
        .slice(ndarray::s![.., lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]])
        .to_owned();
    let fg_target = target
        .data
        .slice(ndarray::s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]])
        .to_owned();
    let fg_mask = mask
        .data
        .slice(ndarray::s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]])
        .mapv(|m| m as f64);

    let positives: Vec<[usize; 3]> = fg_mask
        .indexed_iter()
        .filter(|(_, &m)| m != 0.0)
        .map(|((i, j, k), _)| [i, j, k])
        .collect();
    if positives.is_empty() {
        return Err(Error::EmptyMask {
            context: "augment: no positive mask voxels inside the foreground".into(),
        });
    }

    let dims = [
        fg_target.dim().0,
        fg_target.dim().1,
        fg_target.dim().2,
    ];
    let mut crops = Vec::with_capacity(cfg.crops_per_sample);
    for _ in 0..cfg.crops_per_sample {
        let center = positives[rng.uniform_int(0, positives.len() - 1)];
        let mut start = [0usize; 3];
        for a in 0..3 {
            let half = size / 2;
            let s = center[a].saturating_sub(half).min(dims[a] - size);
            start[a] = s;
        }
        let mut channels = fg_channels
            .slice(ndarray::s![
                ..,
                start[0]..start[0] + size,
                start[1]..start[1] + size,
                start[2]..start[2] + size
            ])
            .to_owned();
        let mut target_c = fg_target
            .slice(ndarray::s![
                start[0]..start[0] + size,
                start[1]..start[1] + size,
                start[2]..start[2] + size
            ])
            .to_owned();
        let mut mask_c = fg_mask
            .slice(ndarray::s![
                start[0]..start[0] + size,
                start[1]..start[1] + size,
                start[2]..start[2] + size
            ])
            .to_owned();

        for axis in 0..3 {
            if rng.bernoulli(cfg.flip_probability) {
                channels.invert_axis(Axis(axis + 1));
                target_c.invert_axis(Axis(axis));
                mask_c.invert_axis(Axis(axis));
            }
        }
        if rng.bernoulli(cfg.rot90_probability) {
            let k = rng.uniform_int(1, cfg.rot90_max_k.max(1));
            for _ in 0..k {
                channels = rot90_4d(&channels);
                target_c = rot90_3d(&target_c);
                mask_c = rot90_3d(&mask_c);
            }
        }

        let channels = channels.as_standard_layout().to_owned();
        let tis_channel = channels.index_axis(Axis(0), 2).to_owned();
        crops.push(TrainingCrop {
            channels,
            target: target_c.as_standard_layout().to_owned(),
            mask: mask_c.as_standard_layout().to_owned(),
            tis_channel,
        });
    }
    Ok(crops)
}

/// 90-degree rotation in the (0,1) spatial plane.
fn rot90_3d(x: &Array3<f64>) -> Array3<f64> {
    let mut y = x.clone();
    y.swap_axes(0, 1);
    let mut y = y.as_standard_layout().to_owned();
    y.invert_axis(Axis(0));
    y.as_standard_layout().to_owned()
}

fn rot90_4d(x: &Array4<f64>) -> Array4<f64> {
    let mut y = x.clone();
    y.swap_axes(1, 2);
    let mut y = y.as_standard_layout().to_owned();
    y.invert_axis(Axis(1));
    y.as_standard_layout().to_owned()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub iterations: usize,
    pub d_loss: f64,
    pub recon: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub style: f64,
    pub total: f64,
    pub val_masked_l1: Option<f64>,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogs {
    pub target: Modality,
    pub fold_index: usize,
    pub planned_masks: usize,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose validation L1 was best; `None` refers to the initial
    /// (pre-training) parameters, which fine-tuning keeps as a candidate.
    pub best_epoch: Option<usize>,
    pub best_val_l1: f64,
}

/// Train one cross-validation fold from scratch; returns the
/// best-validation bundle and the loss history.
pub fn train_fold(
    split: &FoldSplit,
    data: &[TrainSample],
    cfg: &TrainConfig,
    target: Modality,
    out_dir: Option<&Path>,
) -> Result<(ModelBundle, TrainLogs)> {
    cfg.validate()?;
    split.validate()?;
    let train: Vec<&TrainSample> = data
        .iter()
        .filter(|s| split.train_subjects.contains(&s.subject))
        .collect();
    let val: Vec<&TrainSample> = data
        .iter()
        .filter(|s| split.val_subjects.contains(&s.subject))
        .collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "fold subjects not present in the dataset".into(),
        ));
    }

    let mut gen_spec = cfg.generator.clone();
    gen_spec.in_channels = cfg.input_channels();
    let mut rng = RngStream::new(cfg.seed).derive(&format!("fold{}:{target}", split.fold_index));
    let bundle = ModelBundle::init(
        gen_spec,
        cfg.discriminator.clone(),
        cfg.spe,
        BundleMeta {
            epoch: 0,
            seed: cfg.seed,
            dataset_id: format!("fold{}", split.fold_index),
            target,
        },
        &mut rng,
    )?;

    run_training(
        bundle,
        &train,
        &val,
        cfg,
        cfg.masks_per_sample,
        target,
        split.fold_index,
        false,
        out_dir,
    )
}

/// Continue training an existing bundle on one subject of an unseen cohort,
/// validating on the rest. The incoming parameters stay a candidate: if no
/// fine-tuning epoch improves validation L1, they are returned unchanged.
pub fn finetune(
    base: ModelBundle,
    cohort: &[TrainSample],
    cfg: &TrainConfig,
    train_subject: Option<&str>,
    out_dir: Option<&Path>,
) -> Result<(ModelBundle, TrainLogs)> {
    cfg.validate()?;
    let subjects: BTreeSet<String> = cohort.iter().map(|s| s.subject.clone()).collect();
    if subjects.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fine-tuning cohort needs >= 2 subjects, got {}",
            subjects.len()
        )));
    }
    let chosen = match train_subject {
        Some(s) => {
            if !subjects.contains(s) {
                return Err(Error::InvalidArgument(format!(
                    "train subject {s:?} not in cohort"
                )));
            }
            s.to_string()
        }
        None => subjects.iter().next().expect("nonempty").clone(),
    };
    let train: Vec<&TrainSample> = cohort.iter().filter(|s| s.subject == chosen).collect();
    let val: Vec<&TrainSample> = cohort.iter().filter(|s| s.subject != chosen).collect();
    let target = base.meta.target;

    run_training(
        base,
        &train,
        &val,
        cfg,
        cfg.finetune_masks_per_sample,
        target,
        0,
        true,
        out_dir,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    bundle: ModelBundle,
    train: &[&TrainSample],
    val: &[&TrainSample],
    cfg: &TrainConfig,
    masks_per_sample: usize,
    target: Modality,
    fold_index: usize,
    keep_initial_candidate: bool,
    out_dir: Option<&Path>,
) -> Result<(ModelBundle, TrainLogs)> {
    let fx = cfg.extractor.build()?;
    let g_params = bundle.generator.parameters();
    let d_params = bundle.discriminator.parameters();
    let mut adam_g = Adam::new(&g_params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    let mut adam_d = Adam::new(&d_params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
    let master = RngStream::new(cfg.seed).derive(&format!("train:{fold_index}:{target}"));

    let planned_masks: usize = train
        .iter()
        .chain(val.iter())
        .map(|s| s.masks.len().min(masks_per_sample))
        .sum();

    let mut logs = TrainLogs {
        target,
        fold_index,
        planned_masks,
        epochs: Vec::new(),
        best_epoch: None,
        best_val_l1: f64::INFINITY,
    };
    let mut best_state: Option<Vec<(String, ndarray::ArrayD<f64>)>> = None;

    if keep_initial_candidate {
        let (l1, _, _) = validate_bundle(&bundle, val, cfg, target, &master)?;
        if let Some(l1) = l1 {
            logs.best_val_l1 = l1;
            best_state = Some(bundle.state_dict());
        }
    }

    let mut iterations = 0usize;
    let mut stop = false;
    for epoch in 0..cfg.total_epochs {
        if stop {
            break;
        }
        let lr = lr_schedule(epoch, cfg);
        adam_g.lr = lr;
        adam_d.lr = lr;

        // deterministic epoch ordering over (sample, mask)
        let mut work: Vec<(usize, usize)> = Vec::new();
        for (si, s) in train.iter().enumerate() {
            for mi in 0..s.masks.len().min(masks_per_sample) {
                work.push((si, mi));
            }
        }
        let mut order_rng = master.derive_indexed("order", epoch as u64);
        order_rng.shuffle(&mut work);

        let mut batch: Vec<TrainingCrop> = Vec::new();
        let mut sums = [0.0f64; 6]; // d, recon, adv, perc, style, total
        let mut n_batches = 0usize;

        for &(si, mi) in &work {
            if stop {
                break;
            }
            let sample = train[si];
            let key = format!("{}:{}:{}:{}", sample.subject, sample.sample, mi, epoch);
            let stack = assemble_sample_stack(
                sample,
                mi,
                target,
                cfg,
                &mut master.derive(&format!("noise:{key}")),
            )?;
            let target_vol = match target {
                Modality::T1w => &sample.t1,
                _ => &sample.flair,
            };
            let crops = augment(
                &stack,
                target_vol,
                &sample.masks[mi],
                &AugmentConfig::from_train(cfg),
                &mut master.derive(&format!("augment:{key}")),
            )?;
            for crop in crops {
                batch.push(crop);
                if batch.len() == cfg.batch_size {
                    let stats = train_step(&bundle, &fx, &batch, cfg, &mut adam_g, &mut adam_d)?;
                    for (acc, v) in sums.iter_mut().zip(stats.iter()) {
                        *acc += v;
                    }
                    n_batches += 1;
                    iterations += 1;
                    batch.clear();
                    if cfg.max_iterations.is_some_and(|m| iterations >= m) {
                        stop = true;
                        break;
                    }
                }
            }
        }
        if !batch.is_empty() && !stop {
            let stats = train_step(&bundle, &fx, &batch, cfg, &mut adam_g, &mut adam_d)?;
            for (acc, v) in sums.iter_mut().zip(stats.iter()) {
                *acc += v;
            }
            n_batches += 1;
            iterations += 1;
            batch.clear();
            if cfg.max_iterations.is_some_and(|m| iterations >= m) {
                stop = true;
            }
        }

        let denom = n_batches.max(1) as f64;
        let (val_l1, val_psnr, val_ssim) = validate_bundle(&bundle, val, cfg, target, &master)?;
        let log = EpochLog {
            epoch,
            lr,
            iterations,
            d_loss: sums[0] / denom,
            recon: sums[1] / denom,
            adversarial: sums[2] / denom,
            perceptual: sums[3] / denom,
            style: sums[4] / denom,
            total: sums[5] / denom,
            val_masked_l1: val_l1,
            val_psnr,
            val_ssim,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} d {:.4} total {:.4} val L1 {:?}",
            log.d_loss,
            log.total,
            log.val_masked_l1
        );
        if let Some(l1) = val_l1 {
            if l1 < logs.best_val_l1 {
                logs.best_val_l1 = l1;
                logs.best_epoch = Some(epoch);
                best_state = Some(bundle.state_dict());
            }
            if cfg.target_val_l1.is_some_and(|t| l1 < t) {
                stop = true;
            }
        }
        logs.epochs.push(log);

        if let Some(dir) = out_dir {
            let epoch_dir = dir.join(format!("epoch_{epoch:04}"));
            let mut snapshot = bundle_with_meta(&bundle, epoch, cfg.seed, target)?;
            snapshot.meta.epoch = epoch;
            snapshot.save(&epoch_dir)?;
            write_logs(dir, &logs)?;
        }
    }

    // restore the best validation state
    let mut final_bundle = bundle;
    if let Some(state) = best_state {
        let mut map: std::collections::HashMap<String, ndarray::ArrayD<f64>> =
            state.into_iter().collect();
        final_bundle.generator.load_state(&mut map)?;
        final_bundle.discriminator.load_state(&mut map)?;
        final_bundle.meta.epoch = logs.best_epoch.map(|e| e + 1).unwrap_or(0);
    }
    if let Some(dir) = out_dir {
        final_bundle.save(&dir.join("best"))?;
        write_logs(dir, &logs)?;
    }
    Ok((final_bundle, logs))
}

/// Assemble the full channel stack for (sample, mask index) with fresh noise.
pub fn assemble_sample_stack(
    sample: &TrainSample,
    mask_index: usize,
    target: Modality,
    cfg: &TrainConfig,
    noise_rng: &mut RngStream,
) -> Result<ChannelStack> {
    let mask = sample.masks.get(mask_index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "sample {}:{} has no mask {mask_index}",
            sample.subject, sample.sample
        ))
    })?;
    let t1_drop = apply_noise_fill(&sample.t1, mask, &mut noise_rng.derive("t1"))?;
    let fl_drop = apply_noise_fill(&sample.flair, mask, &mut noise_rng.derive("fl"))?;
    let mtis = make_mtis(&sample.tis, mask)?;
    assemble_channels(
        &t1_drop,
        &fl_drop,
        &sample.tis,
        &mtis,
        target,
        &cfg.spe,
        &cfg.canny,
    )
}

/// One D-step then one G-step over a batch of crops. Returns
/// (d, recon, adv, perc, style, total) batch means.
fn train_step(
    bundle: &ModelBundle,
    fx: &FeatureExtractor,
    batch: &[TrainingCrop],
    cfg: &TrainConfig,
    adam_g: &mut Adam,
    adam_d: &mut Adam,
) -> Result<[f64; 6]> {
    let g_params = bundle.generator.parameters();
    let d_params = bundle.discriminator.parameters();
    let scale = 1.0 / batch.len() as f64;

    // ---- discriminator step: generator output detached ----
    let mut d_sum = 0.0;
    for crop in batch {
        let fake_vol = no_grad(|| {
            let x = Tensor::constant(crop.channels.clone().into_dyn());
            bundle.generator.forward(&x, false).map(|t| {
                t.to_array()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("generator output is 3d")
            })
        })?;
        let mut comp = crop.target.clone();
        ndarray::Zip::from(&mut comp)
            .and(&fake_vol)
            .and(&crop.mask)
            .for_each(|o, &p, &m| {
                if m != 0.0 {
                    *o = p;
                }
            });
        let real_in = stack_disc_input(&crop.target, &crop.tis_channel);
        let fake_in = stack_disc_input(&comp, &crop.tis_channel);
        let real_logits = bundle.discriminator.forward(&real_in, true);
        let fake_logits = bundle.discriminator.forward(&fake_in, true);
        let d_loss = adv_d_loss_t(&real_logits, &fake_logits);
        let v = d_loss.scalar_value();
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                name: "discriminator".into(),
                value: v,
            });
        }
        d_sum += v;
        d_loss.backward();
    }
    adam_d.step(&d_params, scale);
    zero_grads(&d_params);
    zero_grads(&g_params);

    // ---- generator step: full composite objective ----
    let mut sums = [0.0f64; 4];
    let mut total_sum = 0.0;
    for crop in batch {
        let x = Tensor::constant(crop.channels.clone().into_dyn());
        let pred = bundle.generator.forward(&x, true)?;
        let comp = composite_t(&pred, &crop.target, &crop.mask);
        let recon = recon_loss_t(&comp, &crop.target, &crop.mask)?;
        let comp4 = comp.reshape(&[1, cfg.crop_size, cfg.crop_size, cfg.crop_size]);
        let tis4 = Tensor::constant(
            crop.tis_channel
                .clone()
                .into_shape_with_order((1, cfg.crop_size, cfg.crop_size, cfg.crop_size))
                .expect("tis channel shape")
                .into_dyn(),
        );
        let fake_logits = bundle
            .discriminator
            .forward(&Tensor::concat0(&[comp4, tis4]), true);
        let g_adv = adv_g_loss_t(&fake_logits);
        let (perc, style) = feature_losses_t(&comp, &crop.target, fx)?;

        let components = [
            recon.scalar_value(),
            g_adv.scalar_value(),
            perc.scalar_value(),
            style.scalar_value(),
        ];
        let total_value = total_loss(components, &cfg.weights)?; // finiteness guard
        for (acc, v) in sums.iter_mut().zip(components.iter()) {
            *acc += v;
        }
        total_sum += total_value;

        let total_t = recon
            .scale(cfg.weights.recon)
            .add(&g_adv.scale(cfg.weights.adversarial))
            .add(&perc.scale(cfg.weights.perceptual))
            .add(&style.scale(cfg.weights.style));
        total_t.backward();
    }
    adam_g.step(&g_params, scale);
    zero_grads(&g_params);
    zero_grads(&d_params); // adversarial term leaked gradients into D; discard

    Ok([
        d_sum * scale,
        sums[0] * scale,
        sums[1] * scale,
        sums[2] * scale,
        sums[3] * scale,
        total_sum * scale,
    ])
}

fn stack_disc_input(img: &Array3<f64>, tis_channel: &Array3<f64>) -> Tensor {
    crate::networks::disc_input(img, tis_channel)
}

/// Validation pass: masked L1 / PSNR / SSIM against the clean originals using
/// each sample's first mask and epoch-independent noise.
fn validate_bundle(
    bundle: &ModelBundle,
    val: &[&TrainSample],
    cfg: &TrainConfig,
    target: Modality,
    master: &RngStream,
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    if val.is_empty() {
        return Ok((None, None, None));
    }
    let mut l1s = Vec::new();
    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    for sample in val {
        let report = evaluate_sample(bundle, sample, cfg, target, master)?;
        if let Some(m) = report.masked {
            l1s.push(m.l1);
            psnrs.push(m.psnr_db);
            if let Some(s) = m.ssim {
                ssims.push(s);
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    Ok((mean(&l1s), mean(&psnrs), mean(&ssims)))
}

/// Metrics for one validation sample (first mask, composite output).
pub fn evaluate_sample(
    bundle: &ModelBundle,
    sample: &TrainSample,
    cfg: &TrainConfig,
    target: Modality,
    master: &RngStream,
) -> Result<MetricsReport> {
    let mut noise = master.derive(&format!(
        "val-noise:{}:{}",
        sample.subject, sample.sample
    ));
    let stack = assemble_sample_stack(sample, 0, target, cfg, &mut noise)?;
    let pred = generator_forward_padded(&stack, bundle)?;
    let target_vol = match target {
        Modality::T1w => &sample.t1,
        _ => &sample.flair,
    };
    let comp = composite(&pred, target_vol, &sample.masks[0])?;
    compute_metrics(target_vol, &comp, Some(&sample.masks[0]))
}

/// Full-volume generator pass with reflect padding to the required spatial
/// multiple, cropped back to the original size.
pub fn generator_forward_padded(stack: &ChannelStack, bundle: &ModelBundle) -> Result<Volume> {
    let m = bundle.generator.spec.spatial_multiple();
    let shape = stack.spatial_shape();
    let padded: Vec<usize> = shape.iter().map(|&n| n.div_ceil(m) * m).collect();
    if padded == shape.to_vec() {
        return generator_forward(stack, bundle);
    }
    let big = crate::channels::pad_channels_reflect_to(
        &stack.channels,
        [padded[0], padded[1], padded[2]],
    );
    let data = no_grad(|| {
        let x = Tensor::constant(big.into_dyn());
        bundle.generator.forward(&x, false).map(|t| {
            t.to_array()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("generator output is 3d")
        })
    })?;
    let cropped = data
        .slice(ndarray::s![0..shape[0], 0..shape[1], 0..shape[2]])
        .to_owned();
    Ok(Volume {
        data: cropped,
        spacing: stack.spacing,
        affine: stack.affine,
        modality: bundle.meta.target,
    })
}

fn bundle_with_meta(
    bundle: &ModelBundle,
    epoch: usize,
    seed: u64,
    target: Modality,
) -> Result<ModelBundle> {
    // cheap snapshot via state dict copy into a freshly initialized bundle
    let mut rng = RngStream::new(0);
    let snapshot = ModelBundle::init(
        bundle.generator.spec.clone(),
        bundle.discriminator.spec.clone(),
        bundle.spe,
        BundleMeta {
            epoch,
            seed,
            dataset_id: bundle.meta.dataset_id.clone(),
            target,
        },
        &mut rng,
    )?;
    let mut map: std::collections::HashMap<String, ndarray::ArrayD<f64>> =
        bundle.state_dict().into_iter().collect();
    snapshot.generator.load_state(&mut map)?;
    snapshot.discriminator.load_state(&mut map)?;
    Ok(snapshot)
}

fn write_logs(dir: &Path, logs: &TrainLogs) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(logs)?;
    std::fs::write(dir.join("logs.json"), json).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from(
        "epoch,lr,iterations,d_loss,recon,adversarial,perceptual,style,total,val_masked_l1,val_psnr,val_ssim\n",
    );
    for e in &logs.epochs {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            e.epoch,
            e.lr,
            e.iterations,
            e.d_loss,
            e.recon,
            e.adversarial,
            e.perceptual,
            e.style,
            e.total,
            opt(e.val_masked_l1),
            opt(e.val_psnr),
            opt(e.val_ssim),
        ));
    }
    std::fs::write(dir.join("logs.csv"), csv).map_err(|e| Error::io(dir, e))
}
