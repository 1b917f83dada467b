//! Manifest (JSON) plus little-endian binary files.
//!
//! ```text
//! proposals.bin        "OVPF" u16 version, u64 count, u32 d_cls, u32 d_emb,
//!                      count x (u32 image_id, 4 x f32 box, f32 objectness,
//!                               d_cls x f32, d_emb x f32)
//! text_embeddings.bin  "OVTE" u16 version, u64 count, u32 d_emb,
//!                      count x (u32 class_id, d_emb x f32)
//! head checkpoint      "OVHD" u16 version, u64 classes, u32 d_cls,
//!                      classes x u32 ids, classes*d_cls f32 weights (row-major),
//!                      classes x f32 biases, u8 projector flag,
//!                      [u32 d_emb, d_emb*d_cls f32 weights, d_emb f32 biases]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClassEmbedding, ClassInfo, Dataset, GroundTruthBox, ImageInfo, ProposalRecord, Split};
use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;
use crate::probe::{ClassifierHead, DistillationProjector};

pub const FORMAT_VERSION: u16 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROPOSALS_FILE: &str = "proposals.bin";
pub const TEXT_EMBEDDINGS_FILE: &str = "text_embeddings.bin";
pub const ANNOTATIONS_FILE: &str = "annotations.json";

const PROPOSAL_MAGIC: &[u8; 4] = b"OVPF";
const TEXT_MAGIC: &[u8; 4] = b"OVTE";
const HEAD_MAGIC: &[u8; 4] = b"OVHD";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u16,
    pub d_cls: usize,
    pub d_emb: usize,
    pub classes: Vec<ClassInfo>,
    pub images: Vec<ImageInfo>,
    pub files: ManifestFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub proposals: String,
    pub text_embeddings: String,
    pub annotations: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationRecord {
    image_id: u32,
    class_id: u32,
    #[serde(rename = "box")]
    bbox: BoxXYXY,
    split: Split,
}

/// Trained head plus the optional distillation projector that travels with it.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCheckpoint {
    pub head: ClassifierHead,
    pub projector: Option<DistillationProjector>,
}

/// Writes the manifest and its three data files into `out_dir`.
pub fn write_dataset(dataset: &Dataset, out_dir: &Path) -> Result<PathBuf> {
    dataset.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let manifest = Manifest {
        version: FORMAT_VERSION,
        d_cls: dataset.d_cls,
        d_emb: dataset.d_emb,
        classes: dataset.classes.clone(),
        images: dataset.images.clone(),
        files: ManifestFiles {
            proposals: PROPOSALS_FILE.into(),
            text_embeddings: TEXT_EMBEDDINGS_FILE.into(),
            annotations: ANNOTATIONS_FILE.into(),
        },
    };

    write_proposals(&out_dir.join(PROPOSALS_FILE), dataset)?;
    write_text_embeddings(
        &out_dir.join(TEXT_EMBEDDINGS_FILE),
        dataset.d_emb,
        &dataset.text_embeddings,
    )?;

    let split_of = |image_id: u32| dataset.image_split(image_id).unwrap_or(Split::Train);
    let annotations: Vec<AnnotationRecord> = dataset
        .annotations
        .iter()
        .map(|g| AnnotationRecord {
            image_id: g.image_id,
            class_id: g.class_id,
            bbox: g.bbox,
            split: split_of(g.image_id),
        })
        .collect();
    write_json(&out_dir.join(ANNOTATIONS_FILE), &annotations)?;

    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_json(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

/// Loads and validates a dataset from its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(manifest_path)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: manifest_path.into(),
            found: manifest.version,
        });
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));

    let proposals = read_proposals(&dir.join(&manifest.files.proposals), manifest.d_cls, manifest.d_emb)?;
    let texts = read_text_embeddings(&dir.join(&manifest.files.text_embeddings), manifest.d_emb)?;
    let records: Vec<AnnotationRecord> = read_json(&dir.join(&manifest.files.annotations))?;

    let mut text_embeddings = Vec::with_capacity(manifest.classes.len());
    for class in &manifest.classes {
        let e_text = texts
            .iter()
            .find(|(id, _)| *id == class.id)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::DanglingReference(format!("no text embedding for class {}", class.id)))?;
        text_embeddings.push(ClassEmbedding {
            class_id: class.id,
            name: class.name.clone(),
            e_text,
        });
    }
    if texts.len() != manifest.classes.len() {
        let unknown = texts
            .iter()
            .find(|(id, _)| !manifest.classes.iter().any(|c| c.id == *id))
            .map(|(id, _)| *id);
        return Err(match unknown {
            Some(id) => Error::DanglingReference(format!("text embedding for unknown class {id}")),
            None => Error::InvalidDataset("duplicate text embedding records".into()),
        });
    }

    let mut annotations = Vec::with_capacity(records.len());
    for r in records {
        match manifest.images.iter().find(|i| i.id == r.image_id) {
            Some(img) if img.split != r.split => {
                return Err(Error::InvalidDataset(format!(
                    "annotation split {:?} disagrees with image {} split {:?}",
                    r.split, r.image_id, img.split
                )))
            }
            _ => {}
        }
        annotations.push(GroundTruthBox {
            image_id: r.image_id,
            class_id: r.class_id,
            bbox: r.bbox,
        });
    }

    let dataset = Dataset {
        d_cls: manifest.d_cls,
        d_emb: manifest.d_emb,
        classes: manifest.classes,
        text_embeddings,
        images: manifest.images,
        proposals,
        annotations,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn write_proposals(path: &Path, dataset: &Dataset) -> Result<()> {
    let rec = 4 + 4 * (5 + dataset.d_cls + dataset.d_emb);
    let mut buf = Vec::with_capacity(22 + rec * dataset.proposals.len());
    buf.extend_from_slice(PROPOSAL_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.proposals.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(dataset.d_cls as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.d_emb as u32).to_le_bytes());
    for p in &dataset.proposals {
        buf.extend_from_slice(&p.image_id.to_le_bytes());
        put_f32s(&mut buf, &p.bbox.to_array());
        buf.extend_from_slice(&p.objectness.to_le_bytes());
        put_f32s(&mut buf, &p.f_cls);
        put_f32s(&mut buf, &p.e_img);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_proposals(path: &Path, d_cls: usize, d_emb: usize) -> Result<Vec<ProposalRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(path, &bytes);
    r.magic(PROPOSAL_MAGIC)?;
    r.version()?;
    let count = r.u64()? as usize;
    let file_d_cls = r.u32()? as usize;
    let file_d_emb = r.u32()? as usize;
    if file_d_cls != d_cls {
        return Err(Error::dim("proposal file d_cls", d_cls, file_d_cls));
    }
    if file_d_emb != d_emb {
        return Err(Error::dim("proposal file d_emb", d_emb, file_d_emb));
    }
    let rec = 4 + 4 * (5 + d_cls + d_emb);
    if r.remaining() != count.saturating_mul(rec) {
        return Err(r.malformed(format!(
            "{} payload bytes for {count} records of {rec} bytes",
            r.remaining()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let image_id = r.u32()?;
        let b = r.f32s(4)?;
        let bbox = BoxXYXY::new(b[0], b[1], b[2], b[3])
            .map_err(|e| r.malformed(format!("proposal {i}: {e}")))?;
        let objectness = r.f32()?;
        let f_cls = r.f32s(d_cls)?;
        let e_img = r.f32s(d_emb)?;
        out.push(ProposalRecord {
            image_id,
            bbox,
            objectness,
            f_cls,
            e_img,
        });
    }
    Ok(out)
}

/// Writes a text-embedding file. Every vector must have length `d_emb`.
pub fn write_text_embeddings(path: &Path, d_emb: usize, embeddings: &[ClassEmbedding]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TEXT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(embeddings.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(d_emb as u32).to_le_bytes());
    for e in embeddings {
        if e.e_text.len() != d_emb {
            return Err(Error::dim(
                format!("text embedding of class {}", e.class_id),
                d_emb,
                e.e_text.len(),
            ));
        }
        buf.extend_from_slice(&e.class_id.to_le_bytes());
        put_f32s(&mut buf, &e.e_text);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_text_embeddings(path: &Path, d_emb: usize) -> Result<Vec<(u32, Vec<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(path, &bytes);
    r.magic(TEXT_MAGIC)?;
    r.version()?;
    let count = r.u64()? as usize;
    let file_d_emb = r.u32()? as usize;
    if file_d_emb != d_emb {
        return Err(Error::dim("text embedding d_emb", d_emb, file_d_emb));
    }
    let rec = 4 + 4 * d_emb;
    if r.remaining() != count.saturating_mul(rec) {
        return Err(r.malformed(format!(
            "{} payload bytes for {count} records of {rec} bytes",
            r.remaining()
        )));
    }
    (0..count).map(|_| Ok((r.u32()?, r.f32s(d_emb)?))).collect()
}

pub fn write_head_checkpoint(path: &Path, ckpt: &HeadCheckpoint) -> Result<()> {
    let head = &ckpt.head;
    let mut buf = Vec::new();
    buf.extend_from_slice(HEAD_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(head.num_classes() as u64).to_le_bytes());
    buf.extend_from_slice(&(head.d_cls() as u32).to_le_bytes());
    for id in head.class_ids() {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    put_f32s(&mut buf, head.weights());
    put_f32s(&mut buf, head.biases());
    match &ckpt.projector {
        None => buf.push(0),
        Some(p) => {
            if p.d_cls() != head.d_cls() {
                return Err(Error::dim("projector d_cls", head.d_cls(), p.d_cls()));
            }
            buf.push(1);
            buf.extend_from_slice(&(p.d_emb() as u32).to_le_bytes());
            put_f32s(&mut buf, p.weights());
            put_f32s(&mut buf, p.biases());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_head_checkpoint(path: &Path) -> Result<HeadCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(path, &bytes);
    r.magic(HEAD_MAGIC)?;
    r.version()?;
    let n = r.u64()? as usize;
    let d_cls = r.u32()? as usize;
    if n.saturating_mul(d_cls + 2).saturating_mul(4) > r.remaining() {
        return Err(r.malformed("class count exceeds file size".into()));
    }
    let class_ids = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let weights = r.f32s(n * d_cls)?;
    let biases = r.f32s(n)?;
    let head = ClassifierHead::new(class_ids, d_cls, weights, biases)?;
    let projector = match r.u8()? {
        0 => None,
        1 => {
            let d_emb = r.u32()? as usize;
            if d_emb.saturating_mul(d_cls + 1).saturating_mul(4) > r.remaining() {
                return Err(r.malformed("projector size exceeds file size".into()));
            }
            let w = r.f32s(d_emb * d_cls)?;
            let b = r.f32s(d_emb)?;
            Some(DistillationProjector::new(d_cls, d_emb, w, b)?)
        }
        flag => return Err(r.malformed(format!("bad projector flag {flag}"))),
    };
    if r.remaining() != 0 {
        return Err(r.malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(HeadCheckpoint { head, projector })
}

fn put_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: path.into(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        detail: e.to_string(),
    })
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn malformed(&self, detail: String) -> Error {
        Error::Malformed {
            path: self.path.into(),
            detail,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.malformed(format!("unexpected end of file at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4).map_err(|_| Error::BadMagic {
            path: self.path.into(),
            expected: String::from_utf8_lossy(expected).into_owned(),
        })?;
        if got != expected {
            return Err(Error::BadMagic {
                path: self.path.into(),
                expected: String::from_utf8_lossy(expected).into_owned(),
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = u16::from_le_bytes(self.take(2)?.try_into().unwrap());
        if v != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: self.path.into(),
                found: v,
            });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{generate_synthetic, ClassKind, SynthConfig};
    use crate::testutil::{bx, unit, Fixture};

    fn small() -> Dataset {
        let cfg = SynthConfig {
            train_images: 6,
            test_images: 4,
            ..SynthConfig::default()
        };
        generate_synthetic(&cfg, 3).unwrap()
    }

    fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn round_trip() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(&manifest).unwrap(), ds);
    }

    #[test]
    fn rewrites_are_byte_identical() {
        let ds = small();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(&ds, a.path()).unwrap();
        write_dataset(&ds, b.path()).unwrap();
        let fa = files(a.path());
        assert_eq!(fa.len(), 4);
        assert_eq!(fa, files(b.path()));
    }

    #[test]
    fn empty_dataset() {
        let ds = Fixture::new(3, 2).class(0, ClassKind::Base, unit(2, 0)).build();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join(PROPOSALS_FILE)).unwrap();
        assert_eq!(bytes.len(), 22);
        assert_eq!(&bytes[6..14], &0u64.to_le_bytes());
        let back = load_dataset(&manifest).unwrap();
        assert!(back.images.is_empty() && back.proposals.is_empty());
        assert_eq!(back, ds);
    }

    #[test]
    fn corrupted_magic() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&small(), dir.path()).unwrap();
        let path = dir.path().join(PROPOSALS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(&manifest), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn short_text_embedding() {
        let ds = Fixture::new(2, 8).class(0, ClassKind::Base, unit(8, 0)).build();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        let short = [ClassEmbedding {
            class_id: 0,
            name: "c0".into(),
            e_text: vec![1.0; 7],
        }];
        // A 7-wide file under a manifest that declares 8.
        write_text_embeddings(&dir.path().join(TEXT_EMBEDDINGS_FILE), 7, &short).unwrap();
        assert!(matches!(load_dataset(&manifest), Err(Error::DimensionMismatch { .. })));
        // And a writer refusing a vector that disagrees with its header.
        assert!(matches!(
            write_text_embeddings(&dir.path().join("x.bin"), 8, &short),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn missing_and_dangling() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(&dir.path().join(MANIFEST_FILE)), Err(Error::MissingFile(_))));

        let manifest = write_dataset(&small(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(ANNOTATIONS_FILE)).unwrap();
        assert!(matches!(load_dataset(&manifest), Err(Error::MissingFile(_))));

        let bad = Fixture::new(1, 1)
            .class(0, ClassKind::Base, vec![1.0])
            .image(1, Split::Train)
            .proposal(2, bx(0.0, 0.0, 1.0, 1.0), 0.5, vec![0.0], vec![1.0])
            .build();
        assert!(matches!(write_dataset(&bad, dir.path()), Err(Error::DanglingReference(_))));
    }

    #[test]
    fn overlapping_partition_rejected_before_writing() {
        let ds = Fixture::new(1, 1)
            .class(0, ClassKind::Base, vec![1.0])
            .class(0, ClassKind::Novel, vec![1.0])
            .build();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        assert!(write_dataset(&ds, &out).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn checkpoint_round_trip() {
        let head = ClassifierHead::new(vec![4, 1, 9], 2, vec![0.5, -1.0, 2.0, 0.0, 1e-3, -7.25], vec![0.1, 0.2, -0.3]).unwrap();
        let projector = DistillationProjector::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![-1.0, 0.0, 1.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for ckpt in [
            HeadCheckpoint {
                head: head.clone(),
                projector: None,
            },
            HeadCheckpoint {
                head: head.clone(),
                projector: Some(projector.clone()),
            },
        ] {
            let path = dir.path().join("nested/h.ovhd");
            write_head_checkpoint(&path, &ckpt).unwrap();
            assert_eq!(read_head_checkpoint(&path).unwrap(), ckpt);
        }
        let path = dir.path().join("nested/h.ovhd");
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_head_checkpoint(&path), Err(Error::Malformed { .. })));
        bytes[..4].copy_from_slice(b"OVPF");
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_head_checkpoint(&path), Err(Error::BadMagic { .. })));
    }
}
