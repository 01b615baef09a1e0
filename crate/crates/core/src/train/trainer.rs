use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Adam, Checkpoint, FreezePlan};
use crate::config::{ModelConfig, TrainConfig};
use crate::dataset::{Sample, SampleSource};
use crate::error::{Error, Result};
use crate::model::AvSam;
use crate::nn::Gradients;
use crate::Scalar;

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: AvSam<T>,
    pub adam: Adam<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        let model = AvSam::new(model)?;
        let adam = Adam::new(&model.params, train);
        Ok(Self { model, adam })
    }

    pub fn from_checkpoint(c: &Checkpoint, train: &TrainConfig) -> Result<Self> {
        let (model, adam) = c.restore(train)?;
        Ok(Self { model, adam })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.adam)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    /// Optimizer step after the update, counting from 1.
    pub step: u64,
    pub loss: f64,
}

/// Mean loss and mean gradient over a batch. Per-sample work runs in
/// parallel; the reduction is sequential in batch order, so the result does
/// not depend on thread scheduling.
pub fn batch_gradients<T: Scalar>(model: &AvSam<T>, batch: &[Sample<T>]) -> Result<(T, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let per_sample: Vec<(T, Gradients<T>)> = batch
        .par_iter()
        .map(|s| model.loss_and_grad(s))
        .collect::<Result<_>>()?;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty");
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    let k = T::one() / T::of(batch.len() as f64);
    grads.scale(k);
    Ok((loss * k, grads))
}

/// One optimizer update on `batch`; returns the batch loss before the update.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[Sample<T>],
    plan: &FreezePlan,
    clip_grad: Option<f64>,
) -> Result<T> {
    let (loss, mut grads) = batch_gradients(&state.model, batch)?;
    if !loss.is_finite() || !grads.all_finite() {
        let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
        return Err(Error::NonFiniteLoss {
            step: state.adam.t + 1,
            detail: format!("loss {loss} on batch [{}]", ids.join(", ")),
        });
    }
    if let Some(c) = clip_grad {
        let norm = grads.global_norm().as_f64();
        if norm > c {
            grads.scale(T::of(c / norm));
        }
    }
    state.adam.step(&mut state.model.params, &grads, plan);
    Ok(loss)
}

/// Permutation of `0..n` for one epoch; depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// `cfg.epochs` passes over `source` in shuffled mini-batches (the last
/// batch of an epoch may be short). `on_step` sees every record as it is
/// produced.
pub fn run_training<T, S>(
    state: &mut TrainState<T>,
    source: &S,
    cfg: &TrainConfig,
    plan: &FreezePlan,
    mut on_step: impl FnMut(&LossRecord) -> Result<()>,
) -> Result<Vec<LossRecord>>
where
    T: Scalar,
    S: SampleSource<T> + ?Sized,
{
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        for chunk in epoch_order(source.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let batch: Vec<Sample<T>> = chunk.par_iter().map(|&i| source.get(i)).collect::<Result<_>>()?;
            let loss = train_step(state, &batch, plan, cfg.clip_grad)?;
            let rec = LossRecord {
                epoch,
                step: state.adam.t,
                loss: loss.as_f64(),
            };
            on_step(&rec)?;
            records.push(rec);
        }
    }
    Ok(records)
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("epoch,step,loss\n");
    for r in records {
        let _ = writeln!(s, "{},{},{}", r.epoch, r.step, r.loss);
    }
    s
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    std::fs::write(path, loss_csv(records)).map_err(|e| Error::io(path, e))
}

/// Mean loss per epoch, in epoch order.
pub fn epoch_means(records: &[LossRecord]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some((e, sum, n)) if *e == r.epoch => {
                *sum += r.loss;
                *n += 1;
            }
            _ => out.push((r.epoch, r.loss, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModuleGroup;
    use crate::synth::{generate_sample, SynthConfig};

    fn tiny_batch(n: usize) -> Vec<Sample<f32>> {
        let cfg = SynthConfig {
            image_size: 16,
            min_half: 2.0,
            max_half: 3.0,
            ..SynthConfig::default()
        };
        let audio = ModelConfig::tiny().audio;
        (0..n).map(|i| generate_sample(&cfg, i).unwrap().to_sample(&audio).unwrap()).collect()
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 3, 0);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 3, 0));
        assert_ne!(a, epoch_order(50, 3, 1));
        assert_ne!(a, epoch_order(50, 4, 0));
    }

    #[test]
    fn single_plan_changes_only_trainable_groups() {
        let batch = tiny_batch(2);
        let train = TrainConfig { lr: 1e-3, ..TrainConfig::default() };
        for plan in [
            FreezePlan::all_frozen(),
            FreezePlan { mask_decoder: true, ..FreezePlan::all_frozen() },
        ] {
            let mut state = TrainState::<f32>::new(&ModelConfig::tiny(), &train).unwrap();
            let before = state.model.params.clone();
            for _ in 0..3 {
                train_step(&mut state, &batch, &plan, None).unwrap();
            }
            for g in ModuleGroup::ALL {
                let same = state.model.params.group_bit_identical(&before, g);
                assert_eq!(same, !plan.is_trainable(g), "{g} under {plan}");
            }
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let batch = tiny_batch(3);
        let model = AvSam::<f32>::new(&ModelConfig::tiny()).unwrap();
        let (loss, g) = batch_gradients(&model, &batch).unwrap();
        let mut sum = 0.0f64;
        let mut acc = Gradients::zeros_like(&model.params);
        for s in &batch {
            let (l, gs) = model.loss_and_grad(s).unwrap();
            sum += l as f64;
            acc.add_assign(&gs);
        }
        acc.scale(1.0 / 3.0);
        assert!((loss as f64 - sum / 3.0).abs() < 1e-6);
        for ((_, a), (_, b)) in g.iter().zip(acc.iter()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-6 * (1.0 + y.abs())));
        }
    }

    #[test]
    fn nan_inputs_abort_with_diagnostic() {
        let mut batch = tiny_batch(1);
        batch[0].spectrogram.values[[0, 0]] = f32::NAN;
        let mut state = TrainState::<f32>::new(&ModelConfig::tiny(), &TrainConfig::default()).unwrap();
        match train_step(&mut state, &batch, &FreezePlan::default(), None) {
            Err(Error::NonFiniteLoss { step: 1, detail }) => assert!(detail.contains("s00000"), "{detail}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_epochs_leave_initialization_and_empty_sets_fail() {
        let batch = tiny_batch(2);
        let train = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let mut state = TrainState::<f32>::new(&ModelConfig::tiny(), &train).unwrap();
        let recs = run_training(&mut state, &batch, &train, &FreezePlan::default(), |_| Ok(())).unwrap();
        assert!(recs.is_empty());
        assert_eq!(state.model.params, AvSam::<f32>::new(&ModelConfig::tiny()).unwrap().params);
        let empty: Vec<Sample<f32>> = Vec::new();
        let train = TrainConfig { epochs: 1, ..train };
        assert!(matches!(
            run_training(&mut state, &empty, &train, &FreezePlan::default(), |_| Ok(())),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn csv_and_epoch_means() {
        let recs = [
            LossRecord { epoch: 0, step: 1, loss: 0.5 },
            LossRecord { epoch: 0, step: 2, loss: 0.25 },
            LossRecord { epoch: 1, step: 3, loss: 0.125 },
        ];
        assert_eq!(loss_csv(&recs), "epoch,step,loss\n0,1,0.5\n0,2,0.25\n1,3,0.125\n");
        assert_eq!(epoch_means(&recs), vec![(0, 0.375), (1, 0.125)]);
    }
}
