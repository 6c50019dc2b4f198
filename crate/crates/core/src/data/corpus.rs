//! Corpus directories: a `corpus.json` header, a `manifest.jsonl` record
//! stream and the images it references (paths relative to the directory).
//!
//! Labels are optional everywhere. A loaded [`Corpus`] counts every label or
//! label-grid access so that label-free pipelines can prove they never
//! looked.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::pnm::{read_pgm, read_ppm, GrayImage};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::Rng;

pub const HEADER_FILE: &str = "corpus.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    pub label: Option<usize>,
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub id: String,
    pub split: Split,
    pub image_size: usize,
    /// Number of label classes; `None` for corpora that carry no labels.
    pub classes: Option<usize>,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub header: CorpusHeader,
    pub records: Vec<ManifestRecord>,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::format(self.root.join(MANIFEST_FILE), reason);
        for (i, r) in self.records.iter().enumerate() {
            let labelled = r.label.is_some() || r.mask.is_some();
            if self.header.split == Split::Unlabeled && labelled {
                return Err(bad(format!("record {i}: unlabeled split carries label fields")));
            }
            if let Some(l) = r.label {
                match self.header.classes {
                    Some(k) if l < k => {}
                    Some(k) => return Err(bad(format!("record {i}: label {l} out of range for {k} classes"))),
                    None => return Err(bad(format!("record {i}: label present but header declares no classes"))),
                }
            }
        }
        Ok(())
    }

    /// Accepts the corpus directory or its `manifest.jsonl`.
    pub fn read(path: &Path) -> Result<Self> {
        let root = if path.is_dir() {
            path.to_path_buf()
        } else {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        let header_path = root.join(HEADER_FILE);
        let raw = std::fs::read(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: CorpusHeader = serde_json::from_slice(&raw)
            .map_err(|e| Error::format(&header_path, e.to_string()))?;

        let manifest_path = root.join(MANIFEST_FILE);
        let file = std::fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&manifest_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(&manifest_path, format!("line {}: {e}", n + 1)))?;
            records.push(rec);
        }
        let manifest = Self {
            root,
            header,
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let header_path = self.root.join(HEADER_FILE);
        let mut header = serde_json::to_vec_pretty(&self.header)?;
        header.push(b'\n');
        std::fs::write(&header_path, header).map_err(|e| Error::io(&header_path, e))?;

        let manifest_path = self.root.join(MANIFEST_FILE);
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        f.write_all(&out).map_err(|e| Error::io(&manifest_path, e))
    }
}

/// An in-memory corpus: images always, labels and label grids when present.
#[derive(Debug)]
pub struct Corpus {
    ids: Vec<String>,
    image_size: usize,
    classes: Option<usize>,
    images: Vec<ImageTensor>,
    labels: Vec<Option<usize>>,
    masks: Vec<Option<GrayImage>>,
    label_reads: AtomicUsize,
}

impl Corpus {
    pub fn from_parts(
        id: &str,
        classes: Option<usize>,
        images: Vec<ImageTensor>,
        labels: Vec<Option<usize>>,
    ) -> Result<Self> {
        let image_size = images.first().map_or(0, ImageTensor::height);
        if labels.len() != images.len() {
            return Err(Error::invalid("labels and images differ in length"));
        }
        if images.iter().any(|im| im.height() != image_size || im.width() != image_size) {
            return Err(Error::invalid(format!("corpus {id}: images are not all {image_size}x{image_size}")));
        }
        let masks = vec![None; images.len()];
        Ok(Self {
            ids: vec![id.to_string()],
            image_size,
            classes,
            images,
            labels,
            masks,
            label_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn classes(&self) -> Option<usize> {
        self.classes
    }

    pub fn image(&self, i: usize) -> &ImageTensor {
        &self.images[i]
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    /// Class label of item `i`. Counted.
    pub fn label(&self, i: usize) -> Option<usize> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.labels[i]
    }

    /// Per-patch label grid of item `i`. Counted.
    pub fn mask(&self, i: usize) -> Option<&GrayImage> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.masks[i].as_ref()
    }

    pub fn has_labels(&self) -> bool {
        !self.labels.is_empty() && self.labels.iter().all(Option::is_some)
    }

    pub fn has_masks(&self) -> bool {
        !self.masks.is_empty() && self.masks.iter().all(Option::is_some)
    }

    /// Number of label / label-grid accesses since loading.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// Concatenation in argument order. Class counts must agree among the
    /// labelled members.
    pub fn union(parts: Vec<Corpus>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let mut acc = iter
            .next()
            .ok_or_else(|| Error::invalid("union of zero corpora"))?;
        for part in iter {
            if !part.is_empty() && !acc.is_empty() && part.image_size != acc.image_size {
                return Err(Error::invalid(format!(
                    "cannot union {}px corpus {:?} with {}px corpus {:?}",
                    part.image_size, part.ids, acc.image_size, acc.ids
                )));
            }
            acc.classes = match (acc.classes, part.classes) {
                (Some(a), Some(b)) if a != b => {
                    return Err(Error::invalid(format!("class counts differ: {a} vs {b}")))
                }
                (a, b) => a.or(b),
            };
            if acc.is_empty() {
                acc.image_size = part.image_size;
            }
            acc.ids.extend(part.ids);
            acc.images.extend(part.images);
            acc.labels.extend(part.labels);
            acc.masks.extend(part.masks);
            *acc.label_reads.get_mut() += part.label_reads.into_inner();
        }
        Ok(acc)
    }

    /// Deterministic visiting order for `epoch`, drawn from a sub-stream of `rng`.
    pub fn epoch_order(&self, rng: &Rng, epoch: usize) -> Vec<usize> {
        rng.substream(&format!("epoch-{epoch}")).permutation(self.len())
    }

    /// Index batches for `epoch`; the final partial batch is kept.
    pub fn epoch_batches(&self, batch_size: usize, rng: &Rng, epoch: usize) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(self
            .epoch_order(rng, epoch)
            .chunks(batch_size)
            .map(<[usize]>::to_vec)
            .collect())
    }
}

/// Loads every image (and any label grids) of a corpus into memory.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let manifest = CorpusManifest::read(path)?;
    let size = manifest.header.image_size;
    let mut images = Vec::with_capacity(manifest.records.len());
    let mut labels = Vec::with_capacity(manifest.records.len());
    let mut masks = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let p = manifest.root.join(&r.path);
        let image = read_ppm(&p)?;
        if image.height() != size || image.width() != size {
            return Err(Error::format(
                &p,
                format!("expected {size}x{size}, found {}x{}", image.height(), image.width()),
            ));
        }
        images.push(image);
        labels.push(r.label);
        masks.push(match &r.mask {
            Some(m) => {
                let mp = manifest.root.join(m);
                let grid = read_pgm(&mp)?;
                let k = manifest.header.classes.unwrap_or(0);
                if let Some(&bad) = grid.data.iter().find(|&&v| v as usize >= k) {
                    return Err(Error::format(&mp, format!("label {bad} out of range for {k} classes")));
                }
                Some(grid)
            }
            None => None,
        });
    }
    Ok(Corpus {
        ids: vec![manifest.header.id.clone()],
        image_size: size,
        classes: manifest.header.classes,
        images,
        labels,
        masks,
        label_reads: AtomicUsize::new(0),
    })
}

/// Loads and unions several corpora in order.
pub fn load_corpora<P: AsRef<Path>>(paths: &[P]) -> Result<Corpus> {
    let parts = paths
        .iter()
        .map(|p| load_corpus(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Corpus::union(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pnm::write_ppm;

    fn write_corpus(dir: &Path, id: &str, n: usize, labels: Option<usize>) -> CorpusManifest {
        std::fs::create_dir_all(dir.join("images")).unwrap();
        let records = (0..n)
            .map(|i| {
                let path = format!("images/{i:04}.ppm");
                write_ppm(&dir.join(&path), &ImageTensor::filled(4, 4, i as f32 / n as f32)).unwrap();
                ManifestRecord {
                    path,
                    label: labels.map(|k| i % k),
                    mask: None,
                }
            })
            .collect();
        let m = CorpusManifest {
            root: dir.to_path_buf(),
            header: CorpusHeader {
                id: id.into(),
                split: if labels.is_some() { Split::Train } else { Split::Unlabeled },
                image_size: 4,
                classes: labels,
                note: "test fixture".into(),
            },
            records,
        };
        m.write().unwrap();
        m
    }

    #[test]
    fn manifest_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let m = write_corpus(tmp.path(), "a", 5, Some(3));
        assert_eq!(CorpusManifest::read(tmp.path()).unwrap(), m);
        assert_eq!(CorpusManifest::read(&tmp.path().join(MANIFEST_FILE)).unwrap(), m);
        let line = std::fs::read_to_string(tmp.path().join(MANIFEST_FILE)).unwrap();
        assert!(line.starts_with(r#"{"path":"images/0000.ppm","label":0,"mask":null}"#));
    }

    #[test]
    fn unlabeled_split_rejects_labels() {
        let tmp = tempfile::tempdir().unwrap();
        let mut m = write_corpus(tmp.path(), "u", 2, None);
        m.records[0].label = Some(0);
        assert!(m.validate().is_err());
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_corpus(tmp.path(), "a", 2, Some(2));
        std::fs::write(
            tmp.path().join(MANIFEST_FILE),
            "{\"path\":\"images/0000.ppm\",\"label\":5,\"mask\":null}\n",
        )
        .unwrap();
        let err = load_corpus(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("out of range"), "{err}");
    }

    #[test]
    fn missing_image_names_path() {
        let tmp = tempfile::tempdir().unwrap();
        write_corpus(tmp.path(), "a", 3, None);
        std::fs::remove_file(tmp.path().join("images/0001.ppm")).unwrap();
        let err = load_corpus(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("images/0001.ppm"), "{err}");
    }

    #[test]
    fn batches_cover_corpus_once_and_repeat() {
        let tmp = tempfile::tempdir().unwrap();
        write_corpus(tmp.path(), "a", 10, None);
        let c = load_corpus(tmp.path()).unwrap();
        let rng = Rng::new(3);
        let b = c.epoch_batches(4, &rng, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, c.epoch_batches(4, &Rng::new(3), 0).unwrap());
        assert_ne!(c.epoch_order(&rng, 0), c.epoch_order(&rng, 1));
    }

    #[test]
    fn union_lengths_add_and_labels_are_counted() {
        let tmp = tempfile::tempdir().unwrap();
        write_corpus(&tmp.path().join("a"), "a", 6, Some(2));
        write_corpus(&tmp.path().join("b"), "b", 4, None);
        let u = load_corpora(&[tmp.path().join("a"), tmp.path().join("b")]).unwrap();
        assert_eq!(u.len(), 10);
        assert_eq!(u.ids(), ["a", "b"]);
        assert_eq!(u.classes(), Some(2));
        assert!(!u.has_labels());
        assert_eq!(u.label_reads(), 0);
        assert_eq!(u.label(1), Some(1));
        assert_eq!(u.label(7), None);
        assert_eq!(u.label_reads(), 2);
    }
}
