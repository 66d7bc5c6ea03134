use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::clips::ONSET_WINDOW_SECONDS;
use super::format::{write_features, FeatureSequence};
use super::manifest::{write_manifest, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Parameters of the synthetic separable scenario.
///
/// Every frame is `base + noise * N(0, I)`. Positive clips add
/// `m(t) * direction`, with `direction` a unit vector orthogonal to `base`:
///
/// ```text
/// m(t) = 0                                              t < start
/// m(t) = drift * (floor + (1 - floor) * min(1, (t - start) / (tau - start)))   otherwise
/// ```
///
/// so the drift ramps linearly from the start frame up to the onset `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Must be even; half are positives.
    pub n_clips: usize,
    pub dim: usize,
    pub frames: usize,
    pub fps: f32,
    pub seed: u64,
    pub drift: f32,
    pub noise: f32,
    /// Drift start is drawn uniformly from `0..=drift_start_max` (capped below tau).
    pub drift_start_max: usize,
    /// Fraction of the full drift present at the start frame.
    pub drift_floor: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_clips: 200,
            dim: 32,
            frames: 50,
            fps: 10.0,
            seed: 0,
            drift: 6.0,
            noise: 1.0,
            drift_start_max: 0,
            drift_floor: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let window = (ONSET_WINDOW_SECONDS * self.fps).round() as usize;
        let problems = [
            (self.n_clips == 0 || self.n_clips % 2 == 1, "n_clips must be even and positive"),
            (self.dim < 2, "dim must be at least 2"),
            (!(self.fps > 0.0 && self.fps.is_finite()), "fps must be positive"),
            (window == 0 || self.frames < window, "frames must cover the onset window"),
            (!(self.drift >= 0.0 && self.drift.is_finite()), "drift must be finite and non-negative"),
            (!(self.noise >= 0.0 && self.noise.is_finite()), "noise must be finite and non-negative"),
            (!(0.0..=1.0).contains(&self.drift_floor), "drift_floor must lie in [0, 1]"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::config(format!("synthetic spec: {msg}"))),
            None => Ok(()),
        }
    }
}

/// Shared frame mean and unit drift direction of a scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBasis {
    pub base: Vec<f32>,
    pub direction: Vec<f32>,
}

fn draw_basis(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> SyntheticBasis {
    let d = spec.dim;
    let base_dist = Normal::new(0.0f64, 0.5).expect("valid normal");
    let base: Vec<f64> = (0..d).map(|_| base_dist.sample(rng)).collect();
    let bb: f64 = base.iter().map(|b| b * b).sum();
    let direction = loop {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        if bb > 0.0 {
            let vb: f64 = v.iter().zip(&base).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(&base).for_each(|(a, b)| *a -= vb / bb * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            break v.into_iter().map(|a| a / norm).collect::<Vec<_>>();
        }
    };
    SyntheticBasis {
        base: base.into_iter().map(|b| b as f32).collect(),
        direction: direction.into_iter().map(|a| a as f32).collect(),
    }
}

/// The basis `synth_generate` uses for `spec`.
pub fn synth_basis(spec: &SyntheticSpec) -> Result<SyntheticBasis> {
    spec.validate()?;
    Ok(draw_basis(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed)))
}

/// Generates `n_clips` clips alternating positive, negative. Clip pair `i`
/// shares the group id `synth-{i:04}`.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Vec<FeatureSequence>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let basis = draw_basis(spec, &mut rng);
    let (t_len, d) = (spec.frames, spec.dim);
    let window = (ONSET_WINDOW_SECONDS * spec.fps).round() as usize;

    let mut clips = Vec::with_capacity(spec.n_clips);
    for i in 0..spec.n_clips {
        let positive = i % 2 == 0;
        let mut data = Vec::with_capacity(t_len * d);
        for _ in 0..t_len {
            for base in &basis.base {
                let z: f32 = StandardNormal.sample(&mut rng);
                data.push(base + spec.noise * z);
            }
        }
        let tau = if positive {
            let tau = rng.gen_range(t_len - window..t_len);
            let start = rng.gen_range(0..=spec.drift_start_max.min(tau));
            for t in start..t_len {
                let ramp = if tau > start {
                    ((t - start) as f32 / (tau - start) as f32).min(1.0)
                } else {
                    1.0
                };
                let m = spec.drift * (spec.drift_floor + (1.0 - spec.drift_floor) * ramp);
                for (x, dir) in data[t * d..(t + 1) * d].iter_mut().zip(&basis.direction) {
                    *x += m * dir;
                }
            }
            Some(tau)
        } else {
            None
        };
        clips.push(FeatureSequence::new(
            Tensor::new(vec![t_len, d], data)?,
            spec.fps,
            positive as u8,
            tau,
            format!("synth-{:04}", i / 2),
        )?);
    }
    Ok(clips)
}

/// Writes `synth_generate(spec)` as VAGF files plus `manifest.toml` in `dir`.
///
/// The last `round(test_fraction * groups)` groups are tagged `test`, the
/// rest `train`. Returns the manifest path.
pub fn write_synthetic_dataset(
    spec: &SyntheticSpec,
    dir: impl AsRef<Path>,
    test_fraction: f64,
) -> Result<std::path::PathBuf> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::config(format!(
            "test fraction must lie in [0, 1], got {test_fraction}"
        )));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let clips = synth_generate(spec)?;
    let groups = clips.len() / 2;
    let test_groups = (test_fraction * groups as f64).round() as usize;
    let mut entries = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip_{i:05}.vagf");
        write_features(clip, dir.join(&name))?;
        let split = if i / 2 >= groups - test_groups { "test" } else { "train" };
        entries.push(ManifestEntry {
            path: name.into(),
            label: clip.label,
            tau: clip.tau,
            group_id: clip.group_id.clone(),
            split: split.into(),
        });
    }
    let path = dir.join("manifest.toml");
    write_manifest(&DatasetManifest::new(entries, dir), &path)?;
    Ok(path)
}
