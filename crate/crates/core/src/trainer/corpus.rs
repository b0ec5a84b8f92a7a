//! Annotated image collections: the synthetic generator or a directory of
//! PPM files with a JSON-lines annotation file.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{PcnError, Result};
use crate::geometry::io::{read_image, write_ppm};
use crate::geometry::ImageBuffer;

use super::synth::FaceAnnotation;

pub const ANNOTATION_FILE: &str = "annotations.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: ImageBuffer,
    pub faces: Vec<FaceAnnotation>,
}

/// Random-access collection of annotated images. Implementations must be
/// deterministic: loading the same index twice yields the same image.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;

    fn load(&self, index: usize) -> Result<LabeledImage>;

    /// Annotations only; sources override this when it avoids decoding.
    fn load_faces(&self, index: usize) -> Result<Vec<FaceAnnotation>> {
        Ok(self.load(index)?.faces)
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One line of `annotations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub file: String,
    pub faces: Vec<FaceAnnotation>,
}

#[derive(Clone, Debug)]
pub struct DiskCorpus {
    root: PathBuf,
    records: Vec<AnnotationRecord>,
}

impl DiskCorpus {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(ANNOTATION_FILE);
        let file = fs::File::open(&path).map_err(|e| {
            PcnError::InsufficientData(format!("cannot open {}: {e}", path.display()))
        })?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(DiskCorpus {
            root: root.to_path_buf(),
            records,
        })
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }
}

impl ImageSource for DiskCorpus {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn load(&self, index: usize) -> Result<LabeledImage> {
        let rec = &self.records[index];
        Ok(LabeledImage {
            image: read_image(&self.root.join(&rec.file))?,
            faces: rec.faces.clone(),
        })
    }

    fn load_faces(&self, index: usize) -> Result<Vec<FaceAnnotation>> {
        Ok(self.records[index].faces.clone())
    }
}

/// Renders every image of `source` into `dir` as PPM plus the annotation file.
pub fn write_corpus(source: &dyn ImageSource, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut ann = BufWriter::new(fs::File::create(dir.join(ANNOTATION_FILE))?);
    for i in 0..source.len() {
        let item = source.load(i)?;
        let file = format!("{i:06}.ppm");
        write_ppm(&dir.join(&file), &item.image)?;
        let rec = AnnotationRecord {
            file,
            faces: item.faces,
        };
        serde_json::to_writer(&mut ann, &rec)?;
        ann.write_all(b"\n")?;
    }
    ann.flush()?;
    Ok(())
}

/// In-memory list of annotated images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryCorpus {
    pub items: Vec<LabeledImage>,
}

impl ImageSource for MemoryCorpus {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn load(&self, index: usize) -> Result<LabeledImage> {
        Ok(self.items[index].clone())
    }
}

/// A view of selected images of another source.
pub struct Subset<'a> {
    source: &'a dyn ImageSource,
    indices: Vec<usize>,
}

impl<'a> Subset<'a> {
    pub fn new(source: &'a dyn ImageSource, indices: Vec<usize>) -> Self {
        assert!(indices.iter().all(|&i| i < source.len()));
        Subset { source, indices }
    }
}

impl ImageSource for Subset<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn load(&self, index: usize) -> Result<LabeledImage> {
        self.source.load(self.indices[index])
    }

    fn load_faces(&self, index: usize) -> Result<Vec<FaceAnnotation>> {
        self.source.load_faces(self.indices[index])
    }
}
