use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::format::FeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Clip length in seconds.
pub const CLIP_SECONDS: f32 = 5.0;
/// The onset of a positive clip lies within this many final seconds.
pub const ONSET_WINDOW_SECONDS: f32 = 2.0;

/// Frames in one clip at `fps`.
pub fn clip_frames(fps: f32) -> usize {
    (CLIP_SECONDS * fps).round() as usize
}

fn onset_window_frames(fps: f32) -> usize {
    (ONSET_WINDOW_SECONDS * fps).round() as usize
}

/// Cuts a positive clip and, when enough earlier footage exists, a negative
/// clip from one source stream with an accident at frame `onset`.
///
/// The positive clip puts the onset at a seeded uniform position within its
/// final two seconds (restricted to placements that fit inside the stream).
/// The negative clip is the latest window ending strictly before
/// `onset - clip_len`.
pub fn make_clips(
    stream: &FeatureSequence,
    onset: usize,
    seed: u64,
) -> Result<(FeatureSequence, Option<FeatureSequence>)> {
    let total = stream.frames();
    let len = clip_frames(stream.fps);
    let window = onset_window_frames(stream.fps);
    if len == 0 || total < len {
        return Err(Error::input(format!(
            "stream of {total} frames is shorter than one {len}-frame clip"
        )));
    }
    if onset >= total {
        return Err(Error::input(format!(
            "onset {onset} outside stream of {total} frames"
        )));
    }
    // onset position inside the clip
    let lo = (len - window.min(len)).max((onset + len).saturating_sub(total));
    let hi = (len - 1).min(onset);
    if lo > hi {
        return Err(Error::input(format!(
            "onset {onset} cannot fall in the final {window} frames of any clip of stream length {total}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = rng.gen_range(lo..=hi);
    let start = onset - pos;
    let positive = FeatureSequence::new(
        slice_rows(&stream.features, start, len)?,
        stream.fps,
        1,
        Some(pos),
        stream.group_id.clone(),
    )?;

    let negative = match onset.checked_sub(2 * len) {
        Some(start) => Some(FeatureSequence::new(
            slice_rows(&stream.features, start, len)?,
            stream.fps,
            0,
            None,
            stream.group_id.clone(),
        )?),
        None => None,
    };
    Ok((positive, negative))
}

fn slice_rows(x: &Tensor<f32>, start: usize, len: usize) -> Result<Tensor<f32>> {
    let d = x.cols();
    Tensor::new(vec![len, d], x.data()[start * d..(start + len) * d].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    /// Row t of the stream holds the value t, so clip contents reveal their offset.
    fn stream(frames: usize, fps: f32) -> FeatureSequence {
        let data = (0..frames).flat_map(|t| [t as f32, -(t as f32)]).collect();
        FeatureSequence::new(Tensor::new(vec![frames, 2], data).unwrap(), fps, 0, None, "src").unwrap()
    }

    #[test]
    fn ten_second_stream() {
        let s = stream(100, 10.0);
        for seed in 0..50 {
            let (pos, neg) = make_clips(&s, 80, seed).unwrap();
            assert_eq!(pos.frames(), 50);
            let tau = pos.tau.unwrap();
            assert!((30..=49).contains(&tau), "{tau}");
            // the row at the onset index came from stream frame 80
            assert_eq!(pos.features.at(tau, 0), 80.0);
            assert_eq!(pos.group_id, "src");
            assert!(neg.is_none(), "80 < 2 * 50 leaves no room");
        }
    }

    #[test]
    fn no_negative_without_pre_accident_footage() {
        let (pos, neg) = make_clips(&stream(50, 10.0), 49, 3).unwrap();
        assert_eq!(pos.tau, Some(49));
        assert!(neg.is_none());
    }

    #[test]
    fn negative_is_latest_admissible_window() {
        let (_, neg) = make_clips(&stream(200, 10.0), 130, 0).unwrap();
        let neg = neg.unwrap();
        assert_eq!(neg.label, 0);
        assert_eq!(neg.group_id, "src");
        assert_eq!(neg.features.at(0, 0), 30.0);
        assert_eq!(neg.features.at(49, 0), 79.0);
    }

    #[test]
    fn short_stream_is_rejected() {
        assert!(matches!(make_clips(&stream(49, 10.0), 40, 0), Err(Error::Input(_))));
        assert!(matches!(make_clips(&stream(60, 10.0), 60, 0), Err(Error::Input(_))));
        // onset too early for the final two seconds of any clip
        assert!(matches!(make_clips(&stream(60, 10.0), 10, 0), Err(Error::Input(_))));
    }

    #[test]
    fn onset_position_is_uniform() {
        let s = stream(300, 10.0);
        let mut counts = [0usize; 20];
        for seed in 0..1000 {
            let (pos, _) = make_clips(&s, 200, seed).unwrap();
            counts[pos.tau.unwrap() - 30] += 1;
        }
        let expected = 1000.0 / 20.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(19.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 {stat}, p {p}");
    }

    proptest! {
        #[test]
        fn negative_never_touches_onset(frames in 50usize..400, frac in 0.0f64..1.0, seed in any::<u64>()) {
            let s = stream(frames, 10.0);
            let onset = 30 + ((frames - 30) as f64 * frac) as usize;
            let onset = onset.min(frames - 1);
            let (pos, neg) = make_clips(&s, onset, seed).unwrap();
            let tau = pos.tau.unwrap();
            prop_assert!((30..50).contains(&tau));
            prop_assert_eq!(pos.features.at(tau, 0) as usize, onset);
            if let Some(neg) = neg {
                let last = neg.features.at(neg.frames() - 1, 0) as usize;
                prop_assert!(last + 50 < onset);
            }
        }
    }
}
