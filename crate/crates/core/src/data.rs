//! Synthetic sequence-transcription task and its binary dataset format.
//!
//! Each label owns a unit-norm prototype vector. A sample draws a label
//! sequence, gives each label a random duration, and emits that many frames
//! of prototype plus Gaussian noise. Every draw comes from a stream keyed by
//! `(seed, sample index, attempt)`, so samples can be generated in any order.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::codec::{put_f32s, put_u32, to_u32, ByteReader};
use crate::ctc::min_frames;
use crate::error::{Error, FormatError, Result};
use crate::seed;

pub const DATASET_MAGIC: [u8; 4] = *b"OTDS";
pub const DATASET_VERSION: u32 = 1;

/// Redraws allowed before a sample is declared infeasible.
pub const MAX_REDRAWS: u32 = 100;

/// Smallest pairwise distance accepted between prototypes.
const PROTOTYPE_MIN_DISTANCE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub num_labels: usize,
    pub feat_dim: usize,
    pub dur_min: usize,
    pub dur_max: usize,
    pub noise_std: f64,
    pub len_min: usize,
    pub len_max: usize,
    pub num_samples: usize,
    pub seed: u64,
    /// Frame reduction of the models trained on this data; samples are drawn
    /// so that the reduced length can still emit the labels.
    pub downsample: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            num_labels: 10,
            feat_dim: 8,
            dur_min: 3,
            dur_max: 8,
            noise_std: 0.3,
            len_min: 2,
            len_max: 10,
            num_samples: 1000,
            seed: 0,
            downsample: 4,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if self.num_labels < 2 {
            return fail("num_labels must be at least 2");
        }
        if self.feat_dim == 0 {
            return fail("feat_dim must be positive");
        }
        if self.dur_min == 0 || self.dur_min > self.dur_max {
            return fail("durations need 1 <= dur_min <= dur_max");
        }
        if self.len_min > self.len_max {
            return fail("len_min must not exceed len_max");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be finite and non-negative");
        }
        if self.downsample == 0 {
            return fail("downsample must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u32,
    /// `[T, D]` features.
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.x.shape()[0]
    }
}

/// A [`TaskSpec`] with its prototypes drawn.
#[derive(Clone, Debug)]
pub struct SynthTask {
    spec: TaskSpec,
    prototypes: Vec<Vec<f64>>,
}

impl SynthTask {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let prototypes = draw_prototypes(&spec)?;
        Ok(SynthTask { spec, prototypes })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn sample(&self, index: usize) -> Result<Sample> {
        self.sample_with_frame_labels(index).map(|(s, _)| s)
    }

    /// Also returns the label that generated each frame.
    pub fn sample_with_frame_labels(&self, index: usize) -> Result<(Sample, Vec<usize>)> {
        let spec = &self.spec;
        if index >= spec.num_samples {
            return Err(Error::usage(format!(
                "sample index {index} beyond {} samples",
                spec.num_samples
            )));
        }
        let id = to_u32(index, "sample index")?;
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
        for attempt in 0..MAX_REDRAWS {
            let key = (index as u64) << 8 | attempt as u64;
            let mut rng = seed::indexed_stream(spec.seed, "sample", key);
            let len = rng.gen_range(spec.len_min..=spec.len_max);
            let y: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.num_labels)).collect();
            let durations: Vec<usize> = (0..len)
                .map(|_| rng.gen_range(spec.dur_min..=spec.dur_max))
                .collect();
            let frames: usize = durations.iter().sum();
            if frames.div_ceil(spec.downsample) < min_frames(&y) {
                continue;
            }
            let mut data = Vec::with_capacity(frames * spec.feat_dim);
            let mut frame_labels = Vec::with_capacity(frames);
            for (&label, &d) in y.iter().zip(&durations) {
                for _ in 0..d {
                    data.extend(
                        self.prototypes[label]
                            .iter()
                            .map(|p| p + noise.sample(&mut rng)),
                    );
                    frame_labels.push(label);
                }
            }
            let x = Tensor::new(vec![frames, spec.feat_dim], data)?;
            return Ok((Sample { id, x, y }, frame_labels));
        }
        Err(Error::usage(format!(
            "sample {index}: no feasible draw within {MAX_REDRAWS} attempts"
        )))
    }

    pub fn samples(&self, range: std::ops::Range<usize>) -> Result<Vec<Sample>> {
        range.map(|i| self.sample(i)).collect()
    }

    /// Fraction of frames whose nearest prototype is the generating label,
    /// over the first `count` samples.
    pub fn class_separation(&self, count: usize) -> Result<f64> {
        let (mut hits, mut total) = (0usize, 0usize);
        for i in 0..count.min(self.spec.num_samples) {
            let (s, labels) = self.sample_with_frame_labels(i)?;
            for (row, &label) in s.x.rows().zip(&labels) {
                let nearest = (0..self.prototypes.len())
                    .min_by(|&a, &b| {
                        sq_dist(row, &self.prototypes[a]).total_cmp(&sq_dist(row, &self.prototypes[b]))
                    })
                    .expect("at least one prototype");
                hits += usize::from(nearest == label);
                total += 1;
            }
        }
        Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn draw_prototypes(spec: &TaskSpec) -> Result<Vec<Vec<f64>>> {
    let mut rng = seed::stream(spec.seed, "prototypes");
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(spec.num_labels);
    let mut attempts = 0;
    while protos.len() < spec.num_labels {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::config(format!(
                "cannot place {} separated prototypes in {} dimensions",
                spec.num_labels, spec.feat_dim
            )));
        }
        let v = Tensor::randn(&[spec.feat_dim], 1.0, &mut rng).into_data();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        let v: Vec<f64> = v.iter().map(|x| x / norm).collect();
        if protos
            .iter()
            .all(|p| sq_dist(p, &v).sqrt() >= PROTOTYPE_MIN_DISTANCE)
        {
            protos.push(v);
        }
    }
    Ok(protos)
}

/// One sample of `spec`.
pub fn gen_sample(spec: &TaskSpec, index: usize) -> Result<Sample> {
    SynthTask::new(spec.clone())?.sample(index)
}

pub fn encode_dataset(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&DATASET_MAGIC);
    put_u32(&mut out, DATASET_VERSION);
    put_u32(&mut out, to_u32(samples.len(), "sample count")?);
    for s in samples {
        if s.x.rank() != 2 {
            return Err(Error::usage("sample features must be [T, D]"));
        }
        put_u32(&mut out, s.id);
        put_u32(&mut out, to_u32(s.y.len(), "label length")?);
        for &t in &s.y {
            put_u32(&mut out, to_u32(t, "label")?);
        }
        put_u32(&mut out, to_u32(s.x.shape()[0], "frame count")?);
        put_u32(&mut out, to_u32(s.x.shape()[1], "feature dim")?);
        put_f32s(&mut out, s.x.data());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sample>, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32("sample count")?;
    let mut samples = Vec::new();
    for _ in 0..count {
        let id = r.u32("sample id")?;
        let len = r.u32("label length")? as usize;
        let mut y = Vec::with_capacity(len.min(1 << 16));
        for _ in 0..len {
            y.push(r.u32("labels")? as usize);
        }
        let frames = r.u32("frame count")? as usize;
        let dim = r.u32("feature dim")? as usize;
        let n = frames
            .checked_mul(dim)
            .ok_or(FormatError::Truncated("features"))?;
        let data = r.f32s(n, "features")?;
        let x = Tensor::new(vec![frames, dim], data)
            .map_err(|e| FormatError::Malformed(e.to_string()))?;
        samples.push(Sample { id, x, y });
    }
    r.finish()?;
    Ok(samples)
}

pub fn write_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(samples)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let bytes = std::fs::read(path)?;
    Ok(decode_dataset(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> TaskSpec {
        TaskSpec {
            num_samples: 20,
            seed: 11,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn noiseless_frames_equal_prototypes() {
        let spec = TaskSpec {
            noise_std: 0.0,
            ..small_spec()
        };
        let task = SynthTask::new(spec).unwrap();
        for i in 0..5 {
            let (s, labels) = task.sample_with_frame_labels(i).unwrap();
            for (row, &l) in s.x.rows().zip(&labels) {
                assert_eq!(row, task.prototypes()[l].as_slice());
            }
        }
    }

    #[test]
    fn samples_are_deterministic_and_bounded() {
        let spec = small_spec();
        let task = SynthTask::new(spec.clone()).unwrap();
        for i in 0..spec.num_samples {
            let a = task.sample(i).unwrap();
            assert_eq!(a, gen_sample(&spec, i).unwrap());
            let l = a.y.len();
            assert!((spec.len_min..=spec.len_max).contains(&l));
            assert!(a.frames() >= l * spec.dur_min && a.frames() <= l * spec.dur_max);
            assert!(a.frames().div_ceil(spec.downsample) >= min_frames(&a.y));
            assert!(a.y.iter().all(|&t| t < spec.num_labels));
        }
    }

    #[test]
    fn prototypes_unit_norm_and_distinct() {
        let task = SynthTask::new(small_spec()).unwrap();
        for (i, p) in task.prototypes().iter().enumerate() {
            assert!((p.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
            for q in &task.prototypes()[i + 1..] {
                assert!(sq_dist(p, q).sqrt() >= PROTOTYPE_MIN_DISTANCE);
            }
        }
    }

    #[test]
    fn index_out_of_range() {
        let task = SynthTask::new(small_spec()).unwrap();
        assert!(task.sample(20).is_err());
    }

    #[test]
    fn impossible_spec_reports_generation_error() {
        let spec = TaskSpec {
            dur_min: 1,
            dur_max: 1,
            len_min: 4,
            len_max: 4,
            ..small_spec()
        };
        assert!(matches!(gen_sample(&spec, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn empty_dataset_is_twelve_bytes() {
        let bytes = encode_dataset(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"OTDS");
        assert!(decode_dataset(&bytes).unwrap().is_empty());
    }

    #[test]
    fn corrupt_headers() {
        let task = SynthTask::new(small_spec()).unwrap();
        let samples = task.samples(0..3).unwrap();
        let bytes = encode_dataset(&samples).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(FormatError::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(decode_dataset(&bad), Err(FormatError::UnsupportedVersion(9)));

        let mut bad = bytes.clone();
        bad[8] = 4;
        assert!(matches!(decode_dataset(&bad), Err(FormatError::Truncated(_))));

        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated(_))
        ));
    }

    #[test]
    fn round_trip_preserves_structure() {
        let task = SynthTask::new(small_spec()).unwrap();
        let samples = task.samples(0..3).unwrap();
        let back = decode_dataset(&encode_dataset(&samples).unwrap()).unwrap();
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.y, b.y);
            assert_eq!(a.x.shape(), b.x.shape());
            for (u, v) in a.x.data().iter().zip(b.x.data()) {
                assert_eq!(*v, *u as f32 as f64);
            }
        }
    }
}
