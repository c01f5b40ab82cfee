//! Uniform sequence sampling and the rehearsal-mixing sampler.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::numerics::{Real, Tensor};

use super::{DataError, RecordSource, TrajectoryRecord};

/// A batch of observation/action/reward sequences in time-major layout:
/// row `t * batch + b` holds timestep `t` of sequence `b`.
///
/// Conventions per slot: `actions` holds the action *preceding* the
/// observation (zero at episode starts), `rewards` the reward received
/// together with the observation (zero at starts), `is_first` marks
/// recurrence resets. `reward_mask[b] == false` silences the reward loss
/// for rehearsed sequences.
#[derive(Clone, Debug)]
pub struct SeqBatch<R: Real> {
    pub obs: Tensor<R>,
    pub actions: Tensor<R>,
    pub rewards: Tensor<R>,
    pub is_first: Vec<bool>,
    pub reward_mask: Vec<bool>,
    pub has_rewards: bool,
    pub batch: usize,
    pub len: usize,
}

impl<R: Real> SeqBatch<R> {
    pub fn slot(&self, t: usize, b: usize) -> usize {
        t * self.batch + b
    }

    pub fn cast<S: Real>(&self) -> SeqBatch<S> {
        SeqBatch {
            obs: self.obs.cast(),
            actions: self.actions.cast(),
            rewards: self.rewards.cast(),
            is_first: self.is_first.clone(),
            reward_mask: self.reward_mask.clone(),
            has_rewards: self.has_rewards,
            batch: self.batch,
            len: self.len,
        }
    }
}

struct SeqSlot<'a> {
    record: &'a TrajectoryRecord,
    start: usize,
    use_rewards: bool,
}

/// Uniformly samples `batch` windows of length `len` over all valid
/// (trajectory, start) pairs of `source`. Windows from trajectories shorter
/// than `len` are front-padded with replicated first frames flagged
/// `is_first`.
pub fn sample_sequences<R: Real, S: RecordSource + ?Sized>(
    source: &S,
    batch: usize,
    len: usize,
    rng: &mut ChaCha12Rng,
) -> Result<SeqBatch<R>, DataError> {
    let n = source.num_records();
    if n == 0 {
        return Err(DataError::EmptySource);
    }
    // Valid starts for a record with T transitions (T+1 frames): windows
    // start at any frame such that the window fits, or just 0 when short.
    let starts_per: Vec<usize> = (0..n)
        .map(|i| (source.record_len(i) + 1).saturating_sub(len).max(1))
        .collect();
    let total: usize = starts_per.iter().sum();

    let mut records = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut u = rng.gen_range(0..total);
        let mut idx = 0;
        while u >= starts_per[idx] {
            u -= starts_per[idx];
            idx += 1;
        }
        let rec = source.fetch(idx)?;
        records.push((rec, u));
    }
    let slots: Vec<SeqSlot> = records
        .iter()
        .map(|(rec, start)| SeqSlot {
            record: rec,
            start: *start,
            use_rewards: rec.rewards.is_some(),
        })
        .collect();
    Ok(assemble(&slots, batch, len))
}

/// Mixes rehearsed offline sequences into an online batch: exactly
/// `round(ratio * batch)` rows come from `retrieved` (reward-masked), the
/// rest from `online`. Row composition is fixed; contents are seed-driven.
pub fn mixed_sample<R: Real, A, B>(
    online: &A,
    retrieved: &B,
    ratio: f64,
    batch: usize,
    len: usize,
    rng: &mut ChaCha12Rng,
) -> Result<SeqBatch<R>, DataError>
where
    A: RecordSource + ?Sized,
    B: RecordSource + ?Sized,
{
    assert!((0.0..=1.0).contains(&ratio), "ratio must be in [0,1]");
    if online.num_records() == 0 {
        return Err(DataError::EmptySource);
    }
    let n_ret = if retrieved.num_records() == 0 {
        0
    } else {
        (ratio * batch as f64).round() as usize
    };
    let n_on = batch - n_ret;

    let retrieved_part: SeqBatch<R> = if n_ret > 0 {
        let mut b = sample_sequences(retrieved, n_ret, len, rng)?;
        // Rehearsed rows never contribute reward gradients.
        for m in b.reward_mask.iter_mut() {
            *m = false;
        }
        b
    } else {
        empty_batch(len)
    };
    let online_part: SeqBatch<R> = if n_on > 0 {
        sample_sequences(online, n_on, len, rng)?
    } else {
        empty_batch(len)
    };
    Ok(concat_batches(&retrieved_part, &online_part))
}

fn empty_batch<R: Real>(len: usize) -> SeqBatch<R> {
    SeqBatch {
        obs: Tensor::zeros(&[0, 0]),
        actions: Tensor::zeros(&[0, 0]),
        rewards: Tensor::zeros(&[0, 0]),
        is_first: Vec::new(),
        reward_mask: Vec::new(),
        has_rewards: false,
        batch: 0,
        len,
    }
}

fn concat_batches<R: Real>(a: &SeqBatch<R>, b: &SeqBatch<R>) -> SeqBatch<R> {
    if a.batch == 0 {
        return b.clone();
    }
    if b.batch == 0 {
        return a.clone();
    }
    assert_eq!(a.len, b.len);
    let batch = a.batch + b.batch;
    let len = a.len;
    let interleave = |xa: &Tensor<R>, xb: &Tensor<R>| -> Tensor<R> {
        let cols = xa.cols();
        let mut data = Vec::with_capacity(len * batch * cols);
        for t in 0..len {
            data.extend_from_slice(
                &xa.data()[t * a.batch * cols..(t + 1) * a.batch * cols],
            );
            data.extend_from_slice(
                &xb.data()[t * b.batch * cols..(t + 1) * b.batch * cols],
            );
        }
        Tensor::from_rows(len * batch, cols, data)
    };
    let mut is_first = Vec::with_capacity(len * batch);
    for t in 0..len {
        is_first.extend_from_slice(&a.is_first[t * a.batch..(t + 1) * a.batch]);
        is_first.extend_from_slice(&b.is_first[t * b.batch..(t + 1) * b.batch]);
    }
    let mut reward_mask = a.reward_mask.clone();
    reward_mask.extend_from_slice(&b.reward_mask);
    SeqBatch {
        obs: interleave(&a.obs, &b.obs),
        actions: interleave(&a.actions, &b.actions),
        rewards: interleave(&a.rewards, &b.rewards),
        is_first,
        reward_mask,
        has_rewards: a.has_rewards || b.has_rewards,
        batch,
        len,
    }
}

fn assemble<R: Real>(slots: &[SeqSlot], batch: usize, len: usize) -> SeqBatch<R> {
    let obs_len = slots[0].record.obs_len;
    let a_dim = slots[0].record.action_dim;
    let mut obs = Tensor::zeros(&[len * batch, obs_len]);
    let mut actions = Tensor::zeros(&[len * batch, a_dim]);
    let mut rewards = Tensor::zeros(&[len * batch, 1]);
    let mut is_first = vec![false; len * batch];
    let mut reward_mask = vec![false; batch];
    let mut has_rewards = false;

    for (b, slot) in slots.iter().enumerate() {
        let rec = slot.record;
        let frames = rec.len() + 1;
        let pad = len.saturating_sub(frames.saturating_sub(slot.start));
        reward_mask[b] = slot.use_rewards;
        has_rewards |= slot.use_rewards;
        for t in 0..len {
            let row = t * batch + b;
            let frame = if t < pad { slot.start } else { slot.start + t - pad };
            // A slot restarts the recurrence at the window head (truncated
            // sequences always begin from the learned initial state), on
            // every padding slot, and on the episode's true first frame.
            is_first[row] = t == 0 || t < pad || (t == pad && slot.start == 0);
            let src = rec.obs(frame);
            obs.data_mut()[row * obs_len..(row + 1) * obs_len]
                .iter_mut()
                .zip(src)
                .for_each(|(d, &s)| *d = R::from_f32(s));
            if frame > 0 && t >= pad {
                let act = rec.action(frame - 1);
                actions.data_mut()[row * a_dim..(row + 1) * a_dim]
                    .iter_mut()
                    .zip(act)
                    .for_each(|(d, &s)| *d = R::from_f32(s));
                if let Some(r) = &rec.rewards {
                    if slot.use_rewards {
                        rewards.data_mut()[row] = R::from_f32(r[frame - 1]);
                    }
                }
            }
        }
    }

    SeqBatch {
        obs,
        actions,
        rewards,
        is_first,
        reward_mask,
        has_rewards,
        batch,
        len,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::RecordMeta;
    use rand::SeedableRng;

    fn record(t: usize, dim: usize, with_rewards: bool, seed: u64) -> TrajectoryRecord {
        let obs = (0..(t + 1) * dim)
            .map(|i| ((i as u64 + seed * 977) % 101) as f32 / 101.0)
            .collect();
        let actions = (0..t * 3)
            .map(|i| ((i as u64 + seed * 31) % 21) as f32 / 10.0 - 1.0)
            .collect();
        let rewards = with_rewards.then(|| (0..t).map(|i| (i as f32).cos()).collect());
        TrajectoryRecord {
            trajectory_id: seed,
            embodiment_id: 0,
            obs_len: dim,
            action_dim: 3,
            observations: obs,
            actions,
            rewards,
            meta: RecordMeta::default(),
        }
    }

    #[test]
    fn single_trajectory_window_is_exact() {
        // One trajectory with exactly len frames: the batch must replay it.
        let rec = record(4, 2, true, 1); // 5 frames
        let source = vec![rec.clone()];
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let batch: SeqBatch<f32> = sample_sequences(&source, 1, 5, &mut rng).unwrap();
        assert_eq!(batch.batch, 1);
        for t in 0..5 {
            assert_eq!(&batch.obs.data()[t * 2..(t + 1) * 2], rec.obs(t));
            if t == 0 {
                assert!(batch.is_first[t]);
                assert_eq!(batch.actions.data()[t * 3..(t + 1) * 3], [0.0; 3]);
            } else {
                assert!(!batch.is_first[t]);
                assert_eq!(&batch.actions.data()[t * 3..(t + 1) * 3], rec.action(t - 1));
                assert_eq!(batch.rewards.data()[t], rec.rewards.as_ref().unwrap()[t - 1]);
            }
        }
    }

    #[test]
    fn same_seed_same_batch() {
        let source: Vec<TrajectoryRecord> = (0..7).map(|i| record(9, 3, true, i)).collect();
        let draw = || {
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            let b: SeqBatch<f32> = sample_sequences(&source, 4, 6, &mut rng).unwrap();
            (
                b.obs.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.actions.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn trajectory_frequencies_are_uniform() {
        // 10 equal-length trajectories, 1e4 single-row draws: each must land
        // within 5 sigma of uniform.
        let source: Vec<TrajectoryRecord> = (0..10).map(|i| record(9, 1, false, i)).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut counts = [0usize; 10];
        let n = 10_000;
        for _ in 0..n {
            let b: SeqBatch<f32> = sample_sequences(&source, 1, 10, &mut rng).unwrap();
            // Identify the trajectory by its unique first frame value.
            let v = b.obs.data()[0];
            let idx = source
                .iter()
                .position(|r| (r.obs(0)[0] - v).abs() < 1e-9)
                .unwrap();
            counts[idx] += 1;
        }
        let p = 0.1;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            let dev = (c as f64 - n as f64 * p).abs();
            assert!(dev <= 5.0 * sigma, "count {c} deviates {dev} > 5 sigma {sigma}");
        }
    }

    #[test]
    fn short_trajectories_are_front_padded() {
        let rec = record(2, 2, false, 3); // 3 frames, window of 5 -> 2 pad slots
        let source = vec![rec.clone()];
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let b: SeqBatch<f32> = sample_sequences(&source, 1, 5, &mut rng).unwrap();
        assert!(b.is_first[0] && b.is_first[1] && b.is_first[2]);
        assert!(!b.is_first[3] && !b.is_first[4]);
        assert_eq!(&b.obs.data()[0..2], rec.obs(0));
        assert_eq!(&b.obs.data()[2..4], rec.obs(0));
        assert_eq!(&b.obs.data()[4..6], rec.obs(0));
        assert_eq!(&b.obs.data()[6..8], rec.obs(1));
    }

    #[test]
    fn mixed_sample_composition_is_exact() {
        let online: Vec<TrajectoryRecord> = (0..5).map(|i| record(9, 2, true, i)).collect();
        let retrieved: Vec<TrajectoryRecord> = (0..5).map(|i| record(9, 2, false, 100 + i)).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let b: SeqBatch<f32> = mixed_sample(&online, &retrieved, 0.25, 16, 4, &mut rng).unwrap();
        assert_eq!(b.batch, 16);
        let masked = b.reward_mask.iter().filter(|&&m| !m).count();
        assert_eq!(masked, 4, "round(0.25 * 16) = 4 rehearsed rows");
        assert!(!b.reward_mask[0] && !b.reward_mask[3]);
        assert!(b.reward_mask[4] && b.reward_mask[15]);
    }

    #[test]
    fn ratio_zero_is_all_online() {
        let online: Vec<TrajectoryRecord> = (0..3).map(|i| record(9, 2, true, i)).collect();
        let retrieved: Vec<TrajectoryRecord> = (0..3).map(|i| record(9, 2, false, 50 + i)).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let b: SeqBatch<f32> = mixed_sample(&online, &retrieved, 0.0, 8, 4, &mut rng).unwrap();
        assert!(b.reward_mask.iter().all(|&m| m));
    }

    #[test]
    fn ratio_one_is_all_retrieved_and_fully_masked() {
        let online: Vec<TrajectoryRecord> = vec![record(9, 2, true, 0)];
        let retrieved: Vec<TrajectoryRecord> = (0..3).map(|i| record(9, 2, false, 50 + i)).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let b: SeqBatch<f32> = mixed_sample(&online, &retrieved, 1.0, 8, 4, &mut rng).unwrap();
        assert!(b.reward_mask.iter().all(|&m| !m));
    }

    #[test]
    fn empty_retrieved_falls_back_to_online() {
        let online: Vec<TrajectoryRecord> = vec![record(9, 2, true, 0)];
        let retrieved: Vec<TrajectoryRecord> = Vec::new();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let b: SeqBatch<f32> = mixed_sample(&online, &retrieved, 0.25, 8, 4, &mut rng).unwrap();
        assert_eq!(b.batch, 8);
        assert!(b.reward_mask.iter().all(|&m| m));
    }

    #[test]
    fn empty_online_is_an_error() {
        let online: Vec<TrajectoryRecord> = Vec::new();
        let retrieved: Vec<TrajectoryRecord> = vec![record(9, 2, false, 0)];
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        assert!(matches!(
            mixed_sample::<f32, _, _>(&online, &retrieved, 0.25, 8, 4, &mut rng),
            Err(DataError::EmptySource)
        ));
    }
}
