//! IDX (MNIST-style) and CSV ingestion.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

/// Decoded IDX payload of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const IDX_UBYTE: u8 = 0x08;

fn parse_err(source: &str, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source.to_string(),
        location: format!("byte offset {offset}"),
        message: message.into(),
    }
}

/// Parses an IDX file with unsigned-byte payload and `expected_ndim` dims
/// (magic `0x0000_08NN`, big-endian dimension sizes).
pub fn parse_idx(bytes: &[u8], expected_ndim: u8, source: &str) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(parse_err(source, bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(source, 0, "magic number must start with two zero bytes"));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(parse_err(source, 2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3];
    if ndim != expected_ndim {
        return Err(parse_err(
            source,
            3,
            format!("expected {expected_ndim} dimensions, header says {ndim}"),
        ));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for d in 0..ndim as usize {
        let off = 4 + 4 * d;
        let Some(raw) = bytes.get(off..off + 4) else {
            return Err(parse_err(source, bytes.len(), format!("truncated size of dimension {d}")));
        };
        dims.push(u32::from_be_bytes(raw.try_into().expect("4 bytes")) as usize);
    }
    let start = 4 + 4 * ndim as usize;
    let n: usize = dims.iter().product();
    let available = bytes.len() - start;
    if available < n {
        return Err(parse_err(
            source,
            bytes.len(),
            format!("truncated payload: header promises {n} bytes, found {available}"),
        ));
    }
    if available > n {
        return Err(parse_err(source, start + n, "trailing bytes after payload"));
    }
    Ok(IdxArray {
        dims,
        data: bytes[start..].to_vec(),
    })
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]` and each
/// sample gets shape `[1, rows, cols]`. With `num_classes = None` the class
/// count is `max(label) + 1`.
pub fn load_idx(images: &Path, labels: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let img_src = images.display().to_string();
    let lbl_src = labels.display().to_string();
    let img = parse_idx(&std::fs::read(images)?, 3, &img_src)?;
    let lbl = parse_idx(&std::fs::read(labels)?, 1, &lbl_src)?;
    if img.dims[0] != lbl.dims[0] {
        return Err(Error::Parse {
            source_name: lbl_src,
            location: "byte offset 4".into(),
            message: format!("{} labels for {} images", lbl.dims[0], img.dims[0]),
        });
    }
    let labels: Vec<usize> = lbl.data.iter().map(|&b| b as usize).collect();
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::Parse {
            source_name: lbl_src,
            location: format!("byte offset {}", 8 + i),
            message: format!("label {l} is not below the class count {classes}"),
        });
    }
    let features = img.data.iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(features, vec![1, img.dims[1], img.dims[2]], labels, classes)
}

/// Loads a CSV file whose header is `label,f0,f1,...` and whose rows hold
/// an integer label followed by the features.
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let source = path.display().to_string();
    let err = |line: u64, message: String| Error::Parse {
        source_name: source.clone(),
        location: format!("line {line}"),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(1, e.to_string()))?;
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(err(1, "header must be `label,f0,f1,...`".into()));
    }
    let width = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut lines = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width + 1 {
            return Err(err(line, format!("expected {} fields, found {}", width + 1, rec.len())));
        }
        let label: usize = rec[0]
            .parse()
            .map_err(|_| err(line, format!("label `{}` is not a non-negative integer", &rec[0])))?;
        for field in rec.iter().skip(1) {
            let v: f32 = field
                .parse()
                .map_err(|_| err(line, format!("feature `{field}` is not a number")))?;
            features.push(v);
        }
        labels.push(label);
        lines.push(line);
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(err(lines[i], format!("label {l} is not below the class count {classes}")));
    }
    Dataset::new(features, vec![width], labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3];
        for d in [4u32, 2, 3] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend((0..24).map(|i| (i * 10) as u8));
        b
    }

    fn idx_labels() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 1];
        b.extend_from_slice(&4u32.to_be_bytes());
        b.extend([0u8, 1, 2, 1]);
        b
    }

    #[test]
    fn idx_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lbl.idx");
        std::fs::write(&ip, idx_images()).unwrap();
        std::fs::write(&lp, idx_labels()).unwrap();
        let d = load_idx(&ip, &lp, None).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.feature_shape(), &[1, 2, 3]);
        assert_eq!(d.num_classes(), 3);
        assert_eq!(d.labels(), &[0, 1, 2, 1]);
        assert!((d.sample(1)[0] - 60.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn idx_truncated_reports_offset() {
        let mut bytes = idx_images();
        bytes.truncate(bytes.len() - 5);
        match parse_idx(&bytes, 3, "img") {
            Err(Error::Parse { location, .. }) => assert!(location.contains("byte offset")),
            other => panic!("{other:?}"),
        }
        assert!(parse_idx(&[0, 0, 8], 3, "img").is_err());
        assert!(parse_idx(&idx_labels(), 3, "lbl").is_err());
    }

    #[test]
    fn csv_round() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "label,f0,f1").unwrap();
        writeln!(f, "0,0.5,1.5").unwrap();
        writeln!(f, "1,-2,3").unwrap();
        drop(f);
        let d = load_csv(&p, Some(2)).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.sample(1), &[-2.0, 3.0]);
    }

    #[test]
    fn csv_label_out_of_range_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "label,f0\n0,1\n1,2\n5,3\n").unwrap();
        match load_csv(&p, Some(3)) {
            Err(Error::Parse { location, message, .. }) => {
                assert_eq!(location, "line 4");
                assert!(message.contains('5'));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_bad_header_and_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "y,f0\n0,1\n").unwrap();
        assert!(load_csv(&p, None).is_err());
        std::fs::write(&p, "label,f0,f1\n0,1\n").unwrap();
        assert!(load_csv(&p, None).is_err());
    }
}
