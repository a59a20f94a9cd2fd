//! On-disk datasets: `rgb.pdt` (N×3×S×S), `depth.pdt` (N×1×S×S),
//! `labels.csv` and `manifest.json` in one directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{augment, generate_sample, AugmentConfig, Label, Sample, SpoofClass, SynthError};
use crate::rng::substream;
use crate::tensor::{read_pdt, write_pdt, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub live: usize,
    pub print: usize,
    pub screen: usize,
    pub mask: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.live + self.print + self.screen + self.mask
    }

    pub fn spoofs(&self) -> usize {
        self.print + self.screen + self.mask
    }

    pub fn get(&self, class: SpoofClass) -> usize {
        match class {
            SpoofClass::None => self.live,
            SpoofClass::Print => self.print,
            SpoofClass::Screen => self.screen,
            SpoofClass::Mask => self.mask,
        }
    }

    fn bump(&mut self, class: SpoofClass) {
        match class {
            SpoofClass::None => self.live += 1,
            SpoofClass::Print => self.print += 1,
            SpoofClass::Screen => self.screen += 1,
            SpoofClass::Mask => self.mask += 1,
        }
    }

    /// `n` samples, half live and the rest spread over the three attacks.
    pub fn balanced(n: usize) -> Self {
        let live = n / 2;
        let spoof = n - live;
        Self {
            live,
            print: spoof - 2 * (spoof / 3),
            screen: spoof / 3,
            mask: spoof / 3,
        }
    }
}

/// Generation request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub counts: ClassCounts,
    pub size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub rgb: String,
    pub depth: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub size: usize,
    pub seed: u64,
    pub counts: ClassCounts,
    pub files: DatasetFiles,
    pub samples: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    index: usize,
    label: u8,
    spoof_class: SpoofClass,
}

/// In-memory dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub size: usize,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `N×3×S×S`
    pub rgb: Tensor,
    /// `N×1×S×S`
    pub depth: Tensor,
    pub labels: Vec<Label>,
    pub classes: Vec<SpoofClass>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Liveness targets (1 live, 0 spoof).
    pub fn liveness(&self) -> Vec<f64> {
        self.labels.iter().map(|l| l.liveness()).collect()
    }

    pub fn class_indices(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.index()).collect()
    }
}

impl Dataset {
    /// Generates every sample from its own counter-derived RNG stream, so the
    /// result does not depend on generation order.
    pub fn generate(spec: &DatasetSpec) -> Result<Self, SynthError> {
        let mut samples = Vec::with_capacity(spec.counts.total());
        for class in SpoofClass::ALL {
            for _ in 0..spec.counts.get(class) {
                let i = samples.len() as u64;
                samples.push(generate_sample(&mut substream(spec.seed, i), class.label(), class, spec.size)?);
            }
        }
        // interleave classes deterministically
        samples.shuffle(&mut substream(spec.seed, u64::MAX));
        Ok(Self {
            name: spec.name.clone(),
            size: spec.size,
            seed: spec.seed,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self) -> ClassCounts {
        let mut c = ClassCounts::default();
        self.samples.iter().for_each(|s| c.bump(s.spoof_class));
        c
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn has_both_labels(&self) -> bool {
        let c = self.counts();
        c.live > 0 && c.spoofs() > 0
    }

    pub fn save(&self, dir: &Path) -> Result<DatasetManifest, SynthError> {
        if self.is_empty() {
            return Err(SynthError::Dataset("refusing to write an empty dataset".into()));
        }
        fs::create_dir_all(dir)?;
        let files = DatasetFiles {
            rgb: "rgb.pdt".into(),
            depth: "depth.pdt".into(),
            labels: "labels.csv".into(),
        };
        let rgb: Vec<&Tensor> = self.samples.iter().map(|s| &s.rgb).collect();
        let depth: Vec<&Tensor> = self.samples.iter().map(|s| &s.depth_target).collect();
        write_pdt(dir.join(&files.rgb), &Tensor::stack(&rgb)?)?;
        write_pdt(dir.join(&files.depth), &Tensor::stack(&depth)?)?;
        let mut w = csv::Writer::from_path(dir.join(&files.labels))?;
        for (index, s) in self.samples.iter().enumerate() {
            w.serialize(LabelRow {
                index,
                label: s.label.as_u8(),
                spoof_class: s.spoof_class,
            })?;
        }
        w.flush()?;
        let manifest = DatasetManifest {
            name: self.name.clone(),
            size: self.size,
            seed: self.seed,
            counts: self.counts(),
            files,
            samples: self.len(),
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }

    /// Loads a dataset from its directory or from the path of its manifest.
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let (dir, manifest_path) = resolve(path);
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        let rgb = read_pdt(dir.join(&manifest.files.rgb))?;
        let depth = read_pdt(dir.join(&manifest.files.depth))?;
        let n = manifest.samples;
        let s = manifest.size;
        if rgb.shape() != [n, 3, s, s] || depth.shape() != [n, 1, s, s] {
            return Err(SynthError::Dataset(format!(
                "tensor shapes {:?} / {:?} do not match manifest ({n} samples of {s}×{s})",
                rgb.shape(),
                depth.shape()
            )));
        }
        let mut reader = csv::Reader::from_path(dir.join(&manifest.files.labels))?;
        let mut samples = Vec::with_capacity(n);
        for (i, row) in reader.deserialize::<LabelRow>().enumerate() {
            let row = row?;
            if row.index != i || i >= n {
                return Err(SynthError::Dataset(format!("labels row {i} has index {}", row.index)));
            }
            let label = Label::from_u8(row.label)
                .ok_or_else(|| SynthError::Dataset(format!("label {} is neither 0 nor 1", row.label)))?;
            samples.push(Sample::new(rgb.index_outer(i), depth.index_outer(i), label, row.spoof_class)?);
        }
        if samples.len() != n {
            return Err(SynthError::Dataset(format!("{} label rows for {n} samples", samples.len())));
        }
        let ds = Self {
            name: manifest.name,
            size: s,
            seed: manifest.seed,
            samples,
        };
        if ds.counts() != manifest.counts {
            return Err(SynthError::Dataset("per-class counts disagree with the labels file".into()));
        }
        Ok(ds)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            size: self.size,
            seed: self.seed,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Seeded random split; the second part holds `round(fraction·N)`
    /// samples (at least one when `fraction > 0` and `N > 1`).
    pub fn split(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut substream(seed, 0x5b1));
        let mut k = (fraction * self.len() as f64).round() as usize;
        if fraction > 0.0 && self.len() > 1 {
            k = k.clamp(1, self.len() - 1);
        }
        let (held, kept) = idx.split_at(k);
        let mut kept = kept.to_vec();
        let mut held = held.to_vec();
        kept.sort_unstable();
        held.sort_unstable();
        (self.subset(&kept), self.subset(&held))
    }

    /// Stacks the given samples, optionally augmenting each one.
    pub fn batch<R: Rng>(&self, indices: &[usize], aug: Option<(&AugmentConfig, &mut R)>) -> Result<Batch, SynthError> {
        let mut rgb = Vec::with_capacity(indices.len() * 3 * self.size * self.size);
        let mut depth = Vec::with_capacity(indices.len() * self.size * self.size);
        let mut labels = Vec::with_capacity(indices.len());
        let mut classes = Vec::with_capacity(indices.len());
        let mut aug = aug;
        for &i in indices {
            let s = &self.samples[i];
            let owned;
            let s = match aug.as_mut() {
                Some((cfg, rng)) => {
                    owned = augment(s, cfg, *rng);
                    &owned
                }
                None => s,
            };
            rgb.extend_from_slice(s.rgb.data());
            depth.extend_from_slice(s.depth_target.data());
            labels.push(s.label);
            classes.push(s.spoof_class);
        }
        let n = indices.len();
        Ok(Batch {
            rgb: Tensor::new(&[n, 3, self.size, self.size], rgb)?,
            depth: Tensor::new(&[n, 1, self.size, self.size], depth)?,
            labels,
            classes,
        })
    }

    /// Index chunks of one epoch, shuffled by `rng`. The last chunk may be
    /// short; one shorter than `min_batch` is folded into its predecessor.
    pub fn epoch_order<R: Rng>(&self, batch_size: usize, min_batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let mut chunks: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < min_batch) {
            let tail = chunks.pop().unwrap();
            chunks.last_mut().unwrap().extend(tail);
        }
        chunks
    }
}

fn resolve(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (dir, path.to_path_buf())
    }
}

/// Generates a dataset and writes it to `dir`.
pub fn make_dataset(spec: &DatasetSpec, dir: &Path) -> Result<DatasetManifest, SynthError> {
    Dataset::generate(spec)?.save(dir)
}
