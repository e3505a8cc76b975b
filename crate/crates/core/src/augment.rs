//! Temporal cutout, cutmix and mixup.
//!
//! Every function takes its randomness from the caller's RNG and returns a
//! record of what it drew, so results can be replayed or inspected. Draw
//! order inside each call is fixed: segment length, segment start (then the
//! donor start for cutmix), then one Bernoulli per channel; mixup draws `m`
//! before its channels.

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::Real;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("donor shape {donor:?} differs from input shape {input:?}")]
    ShapeMismatch {
        input: (usize, usize),
        donor: (usize, usize),
    },
    #[error("invalid augmentation policy: {0}")]
    Policy(String),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationPolicy {
    pub p_apply: f64,
    pub seg_min: usize,
    pub seg_max: usize,
    pub p_channel_cut: f64,
    pub m_min: f64,
    pub m_max: f64,
    pub p_channel_mix: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            p_apply: 0.4,
            seg_min: 64,
            seg_max: 512,
            p_channel_cut: 0.3,
            m_min: 0.6,
            m_max: 0.9,
            p_channel_mix: 0.4,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_apply", self.p_apply),
            ("p_channel_cut", self.p_channel_cut),
            ("p_channel_mix", self.p_channel_mix),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::Policy(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.seg_min < 1 || self.seg_min > self.seg_max {
            return Err(AugmentError::Policy(format!(
                "segment range [{}, {}] is empty or starts below 1",
                self.seg_min, self.seg_max
            )));
        }
        if !(0.0 <= self.m_min && self.m_min <= self.m_max && self.m_max <= 1.0) {
            return Err(AugmentError::Policy(format!(
                "mixup range [{}, {}] not inside [0, 1]",
                self.m_min, self.m_max
            )));
        }
        Ok(())
    }
}

/// A drawn time segment and channel set. For cutout `donor_start == start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegmentDraw {
    pub start: usize,
    pub donor_start: usize,
    pub len: usize,
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixDraw {
    pub m: f64,
    pub channels: Vec<usize>,
}

/// Which augmentations fired during one pipeline call, with their draws.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PipelineRecord {
    pub cutout: Option<SegmentDraw>,
    pub cutmix: Option<SegmentDraw>,
    pub mixup: Option<MixDraw>,
}

fn draw_len<R: Rng + ?Sized>(rows: usize, policy: &AugmentationPolicy, rng: &mut R) -> usize {
    rng.random_range(policy.seg_min..=policy.seg_max).min(rows)
}

fn draw_channels<R: Rng + ?Sized>(channels: usize, p: f64, rng: &mut R) -> Vec<usize> {
    (0..channels).filter(|_| rng.random_bool(p)).collect()
}

fn check_shape<T>(x: &ArrayView2<'_, T>, donor: &ArrayView2<'_, T>) -> Result<()> {
    if x.dim() != donor.dim() {
        return Err(AugmentError::ShapeMismatch {
            input: x.dim(),
            donor: donor.dim(),
        });
    }
    Ok(())
}

/// Zeroes the drawn segment on the drawn channels.
pub fn apply_cutout<T: Real>(x: ArrayView2<'_, T>, draw: &SegmentDraw) -> Array2<T> {
    let mut out = x.to_owned();
    for &c in &draw.channels {
        out.slice_mut(s![draw.start..draw.start + draw.len, c]).fill(T::zero());
    }
    out
}

/// Copies the donor's segment into `x` on the drawn channels.
pub fn apply_cutmix<T: Real>(x: ArrayView2<'_, T>, donor: ArrayView2<'_, T>, draw: &SegmentDraw) -> Array2<T> {
    let mut out = x.to_owned();
    for &c in &draw.channels {
        out.slice_mut(s![draw.start..draw.start + draw.len, c])
            .assign(&donor.slice(s![draw.donor_start..draw.donor_start + draw.len, c]));
    }
    out
}

/// `m·x + (1−m)·donor` on the drawn channels, over every time step.
pub fn apply_mixup<T: Real>(x: ArrayView2<'_, T>, donor: ArrayView2<'_, T>, draw: &MixDraw) -> Array2<T> {
    let mut out = x.to_owned();
    let m = T::of(draw.m);
    let w = T::of(1.0 - draw.m);
    for &c in &draw.channels {
        let mut col = out.column_mut(c);
        for (o, &d) in col.iter_mut().zip(donor.column(c).iter()) {
            *o = m * *o + w * d;
        }
    }
    out
}

pub fn temporal_cutout<T: Real, R: Rng + ?Sized>(
    x: ArrayView2<'_, T>,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> (Array2<T>, SegmentDraw) {
    let (rows, cols) = x.dim();
    let len = draw_len(rows, policy, rng);
    let start = rng.random_range(0..=rows - len);
    let draw = SegmentDraw {
        start,
        donor_start: start,
        len,
        channels: draw_channels(cols, policy.p_channel_cut, rng),
    };
    (apply_cutout(x, &draw), draw)
}

pub fn temporal_cutmix<T: Real, R: Rng + ?Sized>(
    x: ArrayView2<'_, T>,
    donor: ArrayView2<'_, T>,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<(Array2<T>, SegmentDraw)> {
    check_shape(&x, &donor)?;
    let (rows, cols) = x.dim();
    let len = draw_len(rows, policy, rng);
    let start = rng.random_range(0..=rows - len);
    let donor_start = rng.random_range(0..=rows - len);
    let draw = SegmentDraw {
        start,
        donor_start,
        len,
        channels: draw_channels(cols, policy.p_channel_cut, rng),
    };
    Ok((apply_cutmix(x, donor, &draw), draw))
}

pub fn temporal_mixup<T: Real, R: Rng + ?Sized>(
    x: ArrayView2<'_, T>,
    donor: ArrayView2<'_, T>,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<(Array2<T>, MixDraw)> {
    check_shape(&x, &donor)?;
    let m = if policy.m_max > policy.m_min {
        rng.random_range(policy.m_min..=policy.m_max)
    } else {
        policy.m_min
    };
    let draw = MixDraw {
        m,
        channels: draw_channels(x.ncols(), policy.p_channel_mix, rng),
    };
    Ok((apply_mixup(x, donor, &draw), draw))
}

/// Gates cutout, cutmix and mixup independently with `p_apply`, in that
/// order. `donor` is called once for each of cutmix and mixup that fires.
pub fn apply_pipeline<'d, T, R, F>(
    x: ArrayView2<'_, T>,
    mut donor: F,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<(Array2<T>, PipelineRecord)>
where
    T: Real,
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> ArrayView2<'d, T>,
{
    let mut out = x.to_owned();
    let mut record = PipelineRecord::default();
    if rng.random_bool(policy.p_apply) {
        let (y, d) = temporal_cutout(out.view(), policy, rng);
        out = y;
        record.cutout = Some(d);
    }
    if rng.random_bool(policy.p_apply) {
        let dn = donor(rng);
        let (y, d) = temporal_cutmix(out.view(), dn, policy, rng)?;
        out = y;
        record.cutmix = Some(d);
    }
    if rng.random_bool(policy.p_apply) {
        let dn = donor(rng);
        let (y, d) = temporal_mixup(out.view(), dn, policy, rng)?;
        out = y;
        record.mixup = Some(d);
    }
    Ok((out, record))
}

/// FNV-1a over the bytes of `parts`, used to derive independent streams.
pub fn stream_key(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// RNG for one draw of one sample, independent of scheduling order.
pub fn sample_rng(seed: u64, flight_id: &str, epoch: usize, draw: usize) -> ChaCha8Rng {
    let key = stream_key(&[
        &seed.to_le_bytes(),
        flight_id.as_bytes(),
        &(epoch as u64).to_le_bytes(),
        &(draw as u64).to_le_bytes(),
    ]);
    ChaCha8Rng::seed_from_u64(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    /// Emits all-ones words, so every Bernoulli draw below 1 comes out false.
    struct Saturated;

    impl RngCore for Saturated {
        fn next_u32(&mut self) -> u32 {
            u32::MAX
        }
        fn next_u64(&mut self) -> u64 {
            u64::MAX
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0xff);
        }
    }

    fn ramp(rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(t, c)| (t * cols + c) as f64 + 1.0)
    }

    #[test]
    fn no_channels_means_identity() {
        let x = ramp(600, 4);
        let policy = AugmentationPolicy {
            p_channel_cut: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, d) = temporal_cutout(x.view(), &policy, &mut rng);
        assert!(d.channels.is_empty());
        assert_eq!(y, x);
    }

    #[test]
    fn cutout_replay() {
        let x = ramp(200, 3);
        let draw = SegmentDraw {
            start: 10,
            donor_start: 10,
            len: 64,
            channels: vec![0, 2],
        };
        let y = apply_cutout(x.view(), &draw);
        for ((t, c), &v) in y.indexed_iter() {
            let inside = (10..74).contains(&t) && c != 1;
            assert_eq!(v, if inside { 0.0 } else { x[[t, c]] });
        }
    }

    #[test]
    fn replayed_draws_reproduce_output() {
        let x = ramp(700, 5);
        let donor = ramp(700, 5).mapv(|v| -v);
        let policy = AugmentationPolicy::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (y, d) = temporal_cutmix(x.view(), donor.view(), &policy, &mut rng).unwrap();
            assert!((64..=512).contains(&d.len));
            assert_eq!(y, apply_cutmix(x.view(), donor.view(), &d));
            for ((t, c), &v) in y.indexed_iter() {
                if d.channels.contains(&c) && (d.start..d.start + d.len).contains(&t) {
                    assert_eq!(v, donor[[t - d.start + d.donor_start, c]]);
                } else {
                    assert_eq!(v, x[[t, c]]);
                }
            }
        }
    }

    #[test]
    fn self_donation_with_aligned_segment_is_identity() {
        let x = ramp(300, 3);
        let draw = SegmentDraw {
            start: 5,
            donor_start: 5,
            len: 100,
            channels: vec![0, 1, 2],
        };
        assert_eq!(apply_cutmix(x.view(), x.view(), &draw), x);
    }

    #[test]
    fn mixup_boundary_value() {
        let x = Array2::<f64>::from_elem((4, 2), 1.0);
        let donor = Array2::zeros((4, 2));
        let y = apply_mixup(
            x.view(),
            donor.view(),
            &MixDraw {
                m: 0.6,
                channels: vec![1],
            },
        );
        assert!(y.column(1).iter().all(|&v| (v - 0.6).abs() < 1e-12));
        assert!(y.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mixup_is_linear_and_bounded() {
        let x = ramp(50, 4);
        let donor = ramp(50, 4).mapv(|v| (v * 0.37).sin() * 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (y, d) = temporal_mixup(x.view(), donor.view(), &AugmentationPolicy::default(), &mut rng).unwrap();
        assert!((0.6..=0.9).contains(&d.m));
        for ((t, c), &v) in y.indexed_iter() {
            if d.channels.contains(&c) {
                let expect = (1.0 - d.m) * (donor[[t, c]] - x[[t, c]]);
                assert!((v - x[[t, c]] - expect).abs() < 1e-9);
                let (lo, hi) = (x[[t, c]].min(donor[[t, c]]), x[[t, c]].max(donor[[t, c]]));
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            } else {
                assert_eq!(v, x[[t, c]]);
            }
        }
        let (z, _) = temporal_mixup(x.view(), x.view(), &AugmentationPolicy::default(), &mut rng).unwrap();
        for (a, b) in z.iter().zip(x.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x = ramp(10, 2);
        let d = ramp(11, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AugmentationPolicy::default();
        assert!(temporal_cutmix(x.view(), d.view(), &p, &mut rng).is_err());
        assert!(temporal_mixup(x.view(), d.view(), &p, &mut rng).is_err());
    }

    #[test]
    fn segment_clipped_to_short_input() {
        let x = ramp(30, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, d) = temporal_cutout(x.view(), &AugmentationPolicy::default(), &mut rng);
        assert_eq!((d.start, d.len), (0, 30));
    }

    #[test]
    fn gates_off_is_identity() {
        let mut rng = Saturated;
        let x = ramp(100, 3);
        let (y, rec) = apply_pipeline(x.view(), |_| x.view(), &AugmentationPolicy::default(), &mut rng).unwrap();
        assert_eq!(rec, PipelineRecord::default());
        assert_eq!(y, x);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let x = ramp(600, 4);
        let donor = x.mapv(|v| v * 2.0);
        let run = || {
            let mut rng = sample_rng(7, "flight-1", 3, 0);
            apply_pipeline(x.view(), |_| donor.view(), &AugmentationPolicy::default(), &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentationPolicy::default().validate().is_ok());
        let bad = AugmentationPolicy {
            seg_min: 600,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationPolicy {
            p_apply: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stream_keys_differ() {
        let a = stream_key(&[b"ab", b"c"]);
        let b = stream_key(&[b"a", b"bc"]);
        assert_ne!(a, b);
    }
}
