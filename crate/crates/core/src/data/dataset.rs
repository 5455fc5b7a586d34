use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use super::io::{read_file, write_file, Reader, Writer};
use super::scene::{render_scene, ImageSample, SceneSpec, Size, NUM_CLASSES, NUM_POSITIONS};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::rng::{mix64, rng};

const MAGIC: &[u8; 4] = b"LBDS";
const VERSION: u16 = 1;
const HEADER_BYTES: usize = 4 + 2 + 2 + 2 + 4 + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Per-sample render seed. The low 32 bits hold the index and bit 32 the
/// split, so the two splits of one master seed never share a seed.
pub fn sample_seed(master: u64, split: Split, index: usize) -> u64 {
    assert!(index < 1 << 32, "sample index overflows the seed layout");
    (mix64(master) << 33) | ((split as u64) << 32) | index as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub vocab_checksum: u16,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.reserve(dataset_file_size(self.height, self.width, self.len()));
        w.put(MAGIC);
        w.u16(VERSION);
        w.u16(self.height as u16);
        w.u16(self.width as u16);
        w.u32(self.samples.len() as u32);
        w.u16(self.vocab_checksum);
        for s in &self.samples {
            w.f32s(s.pixels.iter().copied());
            w.u16(s.label as u16);
            w.put(&s.spec.to_bytes());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let height = r.u16("height")? as usize;
        let width = r.u16("width")? as usize;
        let count = r.u32("count")? as usize;
        let vocab_checksum = r.u16("vocabulary checksum")?;
        if height == 0 || width == 0 {
            return Err(Error::format(6, "zero image extent"));
        }
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let pixels = r.f32s(height * width * 3, "pixels")?;
            let at = r.offset();
            let label = r.u16("label")? as usize;
            let spec_at = r.offset();
            let raw: [u8; 4] = r.bytes(4, "scene spec")?.try_into().unwrap();
            let spec = SceneSpec::from_bytes(raw)
                .ok_or_else(|| Error::format(spec_at, format!("sample {i}: invalid scene spec {raw:?}")))?;
            if spec.label() != label {
                return Err(Error::format(at, format!("sample {i}: label {label} disagrees with spec")));
            }
            if let Some(bad) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::format(
                    at - 4 * (pixels.len() - bad) as u64,
                    format!("sample {i}: pixel outside [0, 1]"),
                ));
            }
            samples.push(ImageSample { height, width, pixels, label, spec });
        }
        r.finish()?;
        Ok(Dataset { height, width, vocab_checksum, samples })
    }
}

/// Header plus `count` records of pixels, label and spec bytes.
pub fn dataset_file_size(height: usize, width: usize, count: usize) -> usize {
    HEADER_BYTES + count * (height * width * 3 * 4 + 2 + 4)
}

/// Class-balanced samples: sample `i` has class `i mod 16`; size and
/// position are drawn from the sample's own seed.
pub fn generate_dataset(master_seed: u64, count: usize, split: Split, vocab: &Vocabulary) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Argument("dataset count must be positive".into()));
    }
    let samples: Vec<ImageSample> = (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = sample_seed(master_seed, split, i);
            let mut r = rng(mix64(seed));
            let size = Size::ALL[r.random_range(0..Size::ALL.len())];
            let position = r.random_range(0..NUM_POSITIONS) as u8;
            let spec = SceneSpec::from_label(i % NUM_CLASSES, size, position);
            render_scene(&spec, seed)
        })
        .collect();
    let first = &samples[0];
    Ok(Dataset {
        height: first.height,
        width: first.width,
        vocab_checksum: vocab.checksum(),
        samples,
    })
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    write_file(path, &dataset.to_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build()
    }

    #[test]
    fn balanced_classes() {
        let d = generate_dataset(3, 160, Split::Train, &vocab()).unwrap();
        let mut hist = [0usize; NUM_CLASSES];
        d.samples.iter().for_each(|s| hist[s.label] += 1);
        assert!(hist.iter().all(|&h| h == 10), "{hist:?}");

        let d = generate_dataset(3, 37, Split::Val, &vocab()).unwrap();
        let mut hist = [0usize; NUM_CLASSES];
        d.samples.iter().for_each(|s| hist[s.label] += 1);
        let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
        assert!(hi - lo <= 1, "{hist:?}");
    }

    #[test]
    fn splits_are_disjoint() {
        let seeds = |split| -> HashSet<u64> { (0..4096).map(|i| sample_seed(7, split, i)).collect() };
        let (t, v) = (seeds(Split::Train), seeds(Split::Val));
        assert_eq!(t.len(), 4096);
        assert!(t.is_disjoint(&v));

        let train = generate_dataset(7, 64, Split::Train, &vocab()).unwrap();
        let val = generate_dataset(7, 64, Split::Val, &vocab()).unwrap();
        for (a, b) in train.samples.iter().zip(&val.samples) {
            assert_ne!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn count_zero_is_an_argument_error() {
        assert!(matches!(generate_dataset(1, 0, Split::Train, &vocab()), Err(Error::Argument(_))));
    }

    #[test]
    fn round_trip_and_size() {
        let d = generate_dataset(11, 20, Split::Train, &vocab()).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(bytes.len(), dataset_file_size(32, 32, 20));
        assert_eq!(bytes.len(), 16 + 20 * (32 * 32 * 3 * 4 + 2 + 4));
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn format_errors_name_the_offset() {
        let d = generate_dataset(11, 3, Split::Train, &vocab()).unwrap();
        let bytes = d.to_bytes();

        let mut bad = bytes.clone();
        bad[1] = b'!';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));

        let cut = bytes.len() - 3;
        match Dataset::from_bytes(&bytes[..cut]) {
            Err(Error::Format { offset, detail }) => {
                assert!(detail.contains("truncated"), "{detail}");
                assert!(offset as usize <= cut);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_dataset(5, 48, Split::Val, &vocab()).unwrap().to_bytes();
        let b = generate_dataset(5, 48, Split::Val, &vocab()).unwrap().to_bytes();
        assert_eq!(a, b);
    }
}
