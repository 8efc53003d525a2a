//! PGM images with a CSV manifest, and long-format sequence CSVs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{DatasetGeometry, SubjectRecord, TrimodalDataset, IMAGE_CHANNELS};
use crate::error::{Error, LoadError, Result};
use crate::modalities::{validate_image_side, LabeledSamples, Modality};
use crate::nn::Tensor;

pub const MANIFEST_HEADER: [&str; 3] = ["subject_id", "image_path", "label"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| LoadError::Io { path: path.to_owned(), source }.into()
}

fn read_file(path: &Path, context: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            LoadError::MissingFile { context: context.to_owned(), path: path.to_owned() }.into()
        }
        _ => io_err(path)(e),
    })
}

fn parse_label(raw: &str, context: &str) -> Result<usize> {
    match raw.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(LoadError::BadLabel { context: context.to_owned(), label: other.to_owned() }.into()),
    }
}

/// Binary 8-bit greymap of channel 0, values clamped to `[0, 1]`.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::dim("write_pgm", image.shape(), &[0, 0, 0]));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().chunks(c).map(|px| (px[0].clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(io_err(path))
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Reads a P5 image scaled to `[0, 1]` and replicated to three channels.
pub fn load_pgm(path: &Path, context: &str) -> Result<Tensor> {
    let bytes = read_file(path, context)?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(LoadError::BadMagic { context: context.to_owned() }.into());
    }
    let mut pos = 2;
    let mut number = |what: &str| -> Result<usize> {
        let tok = header_token(&bytes, &mut pos).ok_or_else(|| LoadError::BadHeader {
            context: context.to_owned(),
            detail: format!("missing {what}"),
        })?;
        let s = String::from_utf8_lossy(tok);
        s.parse().map_err(|_| {
            LoadError::BadHeader { context: context.to_owned(), detail: format!("{what} {s:?} is not an integer") }
                .into()
        })
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width != height {
        return Err(LoadError::NonSquare { context: context.to_owned(), width, height }.into());
    }
    if maxval != 255 {
        return Err(LoadError::BadMaxval { context: context.to_owned(), maxval }.into());
    }
    let start = pos + 1;
    let pixels = bytes.get(start..start + width * height).ok_or_else(|| LoadError::Malformed {
        context: context.to_owned(),
        detail: format!("expected {} pixel bytes", width * height),
    })?;
    if width == 0 {
        return Err(LoadError::Malformed { context: context.to_owned(), detail: "empty image".into() }.into());
    }
    let data = pixels.iter().flat_map(|&p| [f64::from(p) / 255.0; IMAGE_CHANNELS]).collect();
    Tensor::new(vec![height, width, IMAGE_CHANNELS], data)
}

/// Subject ids and samples of one modality read from disk.
#[derive(Debug, Clone, Default)]
pub struct LoadedModality {
    pub subject_ids: Vec<String>,
    pub samples: LabeledSamples,
}

fn csv_reader(path: &Path, context: &str) -> Result<csv::Reader<std::io::Cursor<Vec<u8>>>> {
    let bytes = read_file(path, context)?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(std::io::Cursor::new(bytes)))
}

fn csv_err(context: &str, e: csv::Error) -> Error {
    LoadError::Malformed { context: context.to_owned(), detail: e.to_string() }.into()
}

/// Manifest rows `subject_id,image_path,label`, paths relative to the
/// manifest's directory. Every image must pass the side constraint.
pub fn load_image_dataset(manifest: &Path) -> Result<LoadedModality> {
    let context = format!("manifest {}", manifest.display());
    let mut rdr = csv_reader(manifest, &context)?;
    let header = rdr.headers().map_err(|e| csv_err(&context, e))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(LoadError::BadHeader { context, detail: format!("expected {}", MANIFEST_HEADER.join(",")) }.into());
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = LoadedModality::default();
    for (i, rec) in rdr.records().enumerate() {
        let row = format!("manifest row {}", i + 1);
        let rec = rec.map_err(|e| csv_err(&row, e))?;
        let label = parse_label(&rec[2], &row)?;
        let image = load_pgm(&base.join(&rec[1]), &row)?;
        validate_image_side(image.shape()[0])?;
        out.subject_ids.push(rec[0].to_owned());
        out.samples.inputs.push(image);
        out.samples.labels.push(label);
    }
    Ok(out)
}

/// Long-format sequences `subject_id,t,f1..fk,label`; every subject must
/// cover timesteps `0..T` exactly once with one label.
pub fn load_sequence_dataset(path: &Path, modality: Modality) -> Result<LoadedModality> {
    if modality == Modality::Image {
        return Err(Error::Parameter("image data is not stored as a sequence CSV".into()));
    }
    let context = format!("{modality} csv {}", path.display());
    let mut rdr = csv_reader(path, &context)?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(&context, e))?.iter().map(str::to_owned).collect();
    let k = header.len().saturating_sub(3);
    let expected: Vec<String> = ["subject_id".to_owned(), "t".to_owned()]
        .into_iter()
        .chain((1..=k).map(|j| format!("f{j}")))
        .chain(["label".to_owned()])
        .collect();
    if k == 0 || header != expected {
        return Err(LoadError::BadHeader { context, detail: "expected subject_id,t,f1..fk,label".into() }.into());
    }

    struct Rows {
        label: usize,
        steps: BTreeMap<usize, Vec<f64>>,
        duplicate: Option<usize>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut subjects: BTreeMap<String, Rows> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = format!("{context} row {row_no}");
        let rec = rec.map_err(|e| csv_err(&row, e))?;
        let id = rec[0].to_owned();
        let numeric = |v: &str| LoadError::NonNumeric { context: format!("subject {id} ({row})"), value: v.to_owned() };
        let t: usize = rec[1].trim().parse().map_err(|_| numeric(&rec[1]))?;
        let feats = (2..2 + k)
            .map(|c| rec[c].trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| numeric(&rec[c])))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let label = parse_label(&rec[2 + k], &format!("subject {id} ({row})"))?;
        let entry = subjects.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Rows { label, steps: BTreeMap::new(), duplicate: None }
        });
        if entry.label != label {
            return Err(LoadError::InconsistentLabel { subject: id, row: row_no }.into());
        }
        if entry.steps.insert(t, feats).is_some() {
            entry.duplicate.get_or_insert(t);
        }
    }

    let mut out = LoadedModality::default();
    let mut steps_expected = None;
    for id in order {
        let rows = subjects.remove(&id).expect("subject recorded");
        let found: Vec<usize> = rows.steps.keys().copied().collect();
        let steps = *steps_expected.get_or_insert(found.len());
        let complete = found.len() == steps && found.iter().enumerate().all(|(i, &t)| i == t);
        if !complete || rows.duplicate.is_some() {
            let mut found = found;
            found.extend(rows.duplicate);
            return Err(LoadError::RaggedTimesteps { subject: id, found }.into());
        }
        let data = rows.steps.into_values().flatten().collect();
        out.samples.inputs.push(Tensor::new(vec![steps, k], data)?);
        out.samples.labels.push(rows.label);
        out.subject_ids.push(id);
    }
    Ok(out)
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(io_err(path))
}

pub fn write_manifest(path: &Path, rows: &[(String, String, usize)]) -> Result<()> {
    let mut out = MANIFEST_HEADER.join(",") + "\n";
    for (id, image, label) in rows {
        out.push_str(&format!("{id},{image},{label}\n"));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Writes `subject_id,t,f1..fk,label` with shortest round-trip decimals.
pub fn write_sequence_csv(path: &Path, rows: &[(&str, &Tensor, usize)]) -> Result<()> {
    let k = rows.first().map_or(1, |(_, t, _)| t.shape()[1]);
    let mut out = String::from("subject_id,t");
    for j in 1..=k {
        out.push_str(&format!(",f{j}"));
    }
    out.push_str(",label\n");
    for (id, seq, label) in rows {
        for (t, feats) in seq.data().chunks(seq.shape()[1]).enumerate() {
            out.push_str(&format!("{id},{t}"));
            for v in feats {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{label}\n"));
        }
    }
    create(path)?.write_all(out.as_bytes()).map_err(io_err(path))
}

/// Locations of an exported dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFiles {
    pub manifest: PathBuf,
    pub image_dir: PathBuf,
    pub cognitive: PathBuf,
    pub biomarker: PathBuf,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            manifest: dir.join("manifest.csv"),
            image_dir: dir.join("images"),
            cognitive: dir.join("cognitive.csv"),
            biomarker: dir.join("biomarker.csv"),
        }
    }
}

/// Writes every present modality under `dir`.
pub fn export_dataset(ds: &TrimodalDataset, dir: &Path) -> Result<DatasetFiles> {
    let files = DatasetFiles::in_dir(dir);
    fs::create_dir_all(&files.image_dir).map_err(io_err(&files.image_dir))?;
    let mut manifest = Vec::new();
    for s in &ds.subjects {
        if let Some(img) = &s.image {
            let rel = format!("images/{}.pgm", s.id);
            write_pgm(&dir.join(&rel), img)?;
            manifest.push((s.id.clone(), rel, s.label));
        }
    }
    write_manifest(&files.manifest, &manifest)?;
    for (m, path) in [(Modality::Cognitive, &files.cognitive), (Modality::Biomarker, &files.biomarker)] {
        let rows: Vec<_> = ds
            .subjects
            .iter()
            .filter_map(|s| s.modality(m).map(|t| (s.id.as_str(), t, s.label)))
            .collect();
        write_sequence_csv(path, &rows)?;
    }
    Ok(files)
}

/// Joins the modality files under `dir` by subject id. Absent files leave
/// the modality missing for everyone; subjects are ordered by id.
pub fn load_dataset_dir(dir: &Path) -> Result<TrimodalDataset> {
    let files = DatasetFiles::in_dir(dir);
    let mut geometry = DatasetGeometry::default();
    let mut subjects: BTreeMap<String, SubjectRecord> = BTreeMap::new();
    let sources = [
        (Modality::Image, &files.manifest),
        (Modality::Cognitive, &files.cognitive),
        (Modality::Biomarker, &files.biomarker),
    ];
    let mut any = false;
    for (m, path) in sources {
        if !path.exists() {
            continue;
        }
        any = true;
        let loaded = match m {
            Modality::Image => load_image_dataset(path)?,
            _ => load_sequence_dataset(path, m)?,
        };
        if let Some(first) = loaded.samples.inputs.first() {
            let s = first.shape();
            match m {
                Modality::Image => (geometry.height, geometry.width) = (s[0], s[1]),
                Modality::Cognitive => (geometry.cognitive_steps, geometry.cognitive_features) = (s[0], s[1]),
                Modality::Biomarker => (geometry.biomarker_steps, geometry.biomarker_features) = (s[0], s[1]),
            }
        }
        for ((id, x), label) in loaded.subject_ids.into_iter().zip(loaded.samples.inputs).zip(loaded.samples.labels) {
            let rec = subjects.entry(id.clone()).or_insert_with(|| SubjectRecord {
                id: id.clone(),
                image: None,
                cognitive: None,
                biomarker: None,
                label,
                corrupted: [false; 3],
            });
            if rec.label != label {
                return Err(Error::Data(format!("subject {id}: {m} label disagrees with earlier files")));
            }
            *rec.modality_mut(m) = Some(x);
        }
    }
    if !any {
        return Err(LoadError::MissingFile { context: "dataset directory".into(), path: files.manifest }.into());
    }
    let ds = TrimodalDataset {
        subjects: subjects.into_values().collect(),
        geometry,
        provenance: format!("files:{}", dir.display()),
        seed: 0,
        normalized_by: None,
    };
    ds.validate()?;
    Ok(ds)
}
