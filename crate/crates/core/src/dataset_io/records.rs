use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{Annotation, BoxPriors, ImageSize, LandmarkClass, LandmarkPoint};

use super::synth::SynthSample;
use crate::imaging::save_image;

/// One image on disk with its native-resolution ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image_path: PathBuf,
    pub annotation: Annotation,
}

impl DatasetRecord {
    pub fn image_id(&self) -> &str {
        &self.annotation.image_id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CsvSource {
    /// `image,od_x,od_y,fov_x,fov_y`
    Unified(PathBuf),
    /// IDRiD-style: one `image, x, y` file per landmark.
    Split { optic_disc: PathBuf, fovea: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub image_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedDataset {
    pub records: Vec<DatasetRecord>,
    /// Rows that were skipped: missing image, centre out of bounds.
    pub rejected: Vec<Rejection>,
    /// Ids that appear in only one of the two split files.
    pub unmatched: Vec<String>,
}

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff", "ppm", "pgm", "bmp"];

type Centres = BTreeMap<String, [Option<(f64, f64)>; 2]>;

fn parse_err(line: u64, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn find_column(headers: &[String], what: &str, pred: impl Fn(&str) -> bool) -> Result<usize> {
    headers.iter().position(|h| pred(&h.to_lowercase())).ok_or_else(|| parse_err(1, format!("no {what} column in header {headers:?}")))
}

fn is_id_column(h: &str) -> bool {
    h.contains("image") || h.contains("id") || h.contains("name")
}

fn parse_coord(field: &str, line: u64, column: &str) -> Result<Option<f64>> {
    let f = field.trim();
    if f.is_empty() {
        return Ok(None);
    }
    let v: f64 = f.parse().map_err(|_| parse_err(line, format!("{column}: {f:?} is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{column}: {f:?} is not finite")));
    }
    Ok(Some(v))
}

/// `(line, image id, one optional point per column pair)`.
type Row = (u64, String, Vec<Option<(f64, f64)>>);

/// Reads `(id, [x, y] per column pair)` rows, skipping blank lines.
fn read_rows(path: &Path, pairs: &[(bool, &str)]) -> Result<Vec<Row>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::data(format!("cannot open {}: {e}", path.display())),
        _ => parse_err(1, e.to_string()),
    })?;
    let headers: Vec<String> = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.iter().map(str::to_string).collect();
    if headers.iter().all(|h| h.is_empty()) {
        return Err(parse_err(1, format!("{} has no header row", path.display())));
    }
    let id_col = find_column(&headers, "image id", is_id_column)?;
    let mut cols = Vec::new();
    for &(unified, tag) in pairs {
        let matches = |h: &str, axis: char| {
            let l = h.to_lowercase();
            let axis_hit =
                l.ends_with(axis) || l.contains(&format!("{axis}-")) || l.contains(&format!("{axis} ")) || l.contains(&format!("_{axis}"));
            !is_id_column(&l) && axis_hit && (!unified || l.contains(tag))
        };
        let x = headers.iter().position(|h| matches(h, 'x')).ok_or_else(|| parse_err(1, format!("no {tag} x column in {headers:?}")))?;
        let y = headers.iter().position(|h| matches(h, 'y')).ok_or_else(|| parse_err(1, format!("no {tag} y column in {headers:?}")))?;
        cols.push((x, y, tag));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let id = rec.get(id_col).unwrap_or("").trim();
        if id.is_empty() {
            return Err(parse_err(line, "empty image id"));
        }
        let mut centres = Vec::new();
        for &(xc, yc, tag) in &cols {
            let x = parse_coord(rec.get(xc).unwrap_or(""), line, &headers[xc])?;
            let y = parse_coord(rec.get(yc).unwrap_or(""), line, &headers[yc])?;
            centres.push(match (x, y) {
                (Some(x), Some(y)) => Some((x, y)),
                (None, None) => None,
                _ => return Err(parse_err(line, format!("{tag}: only one coordinate given"))),
            });
        }
        rows.push((line, id.to_string(), centres));
    }
    Ok(rows)
}

fn insert(out: &mut Centres, line: u64, id: String, slot: usize, c: Option<(f64, f64)>) -> Result<()> {
    let e = out.entry(id.clone()).or_insert([None, None]);
    if c.is_some() && e[slot].is_some() {
        return Err(parse_err(line, format!("duplicate row for {id}")));
    }
    if c.is_some() {
        e[slot] = c;
    }
    Ok(())
}

fn read_centres(source: &CsvSource) -> Result<(Centres, Vec<String>)> {
    let mut out = Centres::new();
    let mut unmatched = Vec::new();
    match source {
        CsvSource::Unified(path) => {
            for (line, id, c) in read_rows(path, &[(true, "od"), (true, "fov")])? {
                if out.contains_key(&id) {
                    return Err(parse_err(line, format!("duplicate row for {id}")));
                }
                out.insert(id, [c[0], c[1]]);
            }
        }
        CsvSource::Split { optic_disc, fovea } => {
            let od = read_rows(optic_disc, &[(false, "")])?;
            let fv = read_rows(fovea, &[(false, "")])?;
            for (line, id, c) in od {
                insert(&mut out, line, id, 0, c[0])?;
            }
            for (line, id, c) in fv {
                insert(&mut out, line, id, 1, c[0])?;
            }
            unmatched = out.iter().filter(|(_, c)| c[0].is_none() != c[1].is_none()).map(|(id, _)| id.clone()).collect();
        }
    }
    Ok((out, unmatched))
}

/// First existing `dir/id` or `dir/id.ext`.
pub fn find_image(dir: &Path, id: &str) -> Option<PathBuf> {
    let direct = dir.join(id);
    if direct.is_file() {
        return Some(direct);
    }
    IMAGE_EXTENSIONS.iter().flat_map(|e| [e.to_string(), e.to_uppercase()]).map(|e| dir.join(format!("{id}.{e}"))).find(|p| p.is_file())
}

/// Joins centre coordinates with image files. Rows whose image is missing or
/// unreadable, or whose centres fall outside the image, are skipped with a
/// warning and listed in `rejected`; malformed rows abort with the line.
pub fn load_dataset(image_dir: &Path, source: &CsvSource, priors: &BoxPriors) -> Result<LoadedDataset> {
    let (centres, unmatched) = read_centres(source)?;
    for id in &unmatched {
        log::warn!("{id}: only one landmark present in the split CSVs");
    }
    let mut out = LoadedDataset { unmatched, ..LoadedDataset::default() };
    for (id, c) in centres {
        let mut reject = |reason: String| {
            log::warn!("skipping {id}: {reason}");
            out.rejected.push(Rejection { image_id: id.clone(), reason });
        };
        let Some(path) = find_image(image_dir, &id) else {
            reject(format!("no image file in {}", image_dir.display()));
            continue;
        };
        let (w, h) = match image::image_dimensions(&path) {
            Ok(d) => d,
            Err(e) => {
                reject(format!("cannot read {}: {e}", path.display()));
                continue;
            }
        };
        let size = ImageSize::new(w, h);
        let mut ann = Annotation::new(id.clone(), size);
        let mut outside = None;
        for (slot, class) in LandmarkClass::ALL.into_iter().enumerate() {
            if let Some((x, y)) = c[slot] {
                if !size.contains(x, y) {
                    outside = Some(format!("{class} centre ({x}, {y}) outside {size} image"));
                }
                ann.set_point(LandmarkPoint::new(x, y, class));
            }
        }
        if let Some(reason) = outside {
            reject(reason);
            continue;
        }
        if ann.points().next().is_none() {
            reject("no landmark coordinates".into());
            continue;
        }
        let annotation = ann.with_prior_boxes(priors)?;
        out.records.push(DatasetRecord { image_path: path, annotation });
    }
    Ok(out)
}

fn fmt_point(p: Option<&LandmarkPoint>) -> String {
    p.map_or(",".to_string(), |p| format!("{:.3},{:.3}", p.x, p.y))
}

/// Unified CSV text, coordinates in each annotation's frame at 3 decimals.
pub fn unified_csv(annotations: &[&Annotation]) -> String {
    let mut s = String::from("image,od_x,od_y,fov_x,fov_y\n");
    for a in annotations {
        let _ = writeln!(s, "{},{},{}", a.image_id, fmt_point(a.optic_disc.as_ref()), fmt_point(a.fovea.as_ref()));
    }
    s
}

pub fn save_unified(path: &Path, annotations: &[&Annotation]) -> Result<()> {
    std::fs::write(path, unified_csv(annotations))?;
    Ok(())
}

/// Number of training images when `n` are split with `fraction`.
pub fn train_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n)
}

pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const IMAGE_DIR: &str = "images";

/// `images/<id>.png`, plus `train.csv` with the first samples and
/// `test.csv` with the rest.
pub fn write_dataset(dir: &Path, samples: &[SynthSample], train_fraction: f64) -> Result<(usize, usize)> {
    let images = dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&images)?;
    for s in samples {
        save_image(&s.image, &images.join(format!("{}.png", s.annotation.image_id)))?;
    }
    let n_train = train_count(samples.len(), train_fraction);
    let anns: Vec<&Annotation> = samples.iter().map(|s| &s.annotation).collect();
    save_unified(&dir.join(TRAIN_CSV), &anns[..n_train])?;
    save_unified(&dir.join(TEST_CSV), &anns[n_train..])?;
    Ok((n_train, samples.len() - n_train))
}

/// Loads `train.csv` or `test.csv` from a directory written by [`write_dataset`].
pub fn load_split(dir: &Path, csv_name: &str, priors: &BoxPriors) -> Result<LoadedDataset> {
    let csv = dir.join(csv_name);
    if !csv.is_file() {
        return Err(Error::data(format!("{} not found", csv.display())));
    }
    load_dataset(&dir.join(IMAGE_DIR), &CsvSource::Unified(csv), priors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image;

    fn img_dir(ids: &[&str], w: u32, h: u32) -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        for id in ids {
            save_image(&Image::filled(w, h, 3, 0.5), &d.path().join(format!("{id}.png"))).unwrap();
        }
        d
    }

    #[test]
    fn unified_row_parses() {
        let d = img_dir(&["IDRiD_01"], 4288, 2848);
        let csv = d.path().join("c.csv");
        std::fs::write(&csv, "image,od_x,od_y,fov_x,fov_y\nIDRiD_01,2500.0,1400.0,2100.0,1500.0\n\n").unwrap();
        let out = load_dataset(d.path(), &CsvSource::Unified(csv), &BoxPriors::default()).unwrap();
        assert_eq!(out.records.len(), 1);
        let a = &out.records[0].annotation;
        assert_eq!(a.native_size, ImageSize::new(4288, 2848));
        assert_eq!((a.optic_disc.unwrap().x, a.optic_disc.unwrap().y), (2500.0, 1400.0));
        assert_eq!((a.fovea.unwrap().x, a.fovea.unwrap().y), (2100.0, 1500.0));
        assert!(a.optic_disc_box.is_some() && a.fovea_box.is_some());
    }

    #[test]
    fn split_files_with_idrid_headers() {
        let d = img_dir(&["IDRiD_01", "IDRiD_02"], 64, 48);
        let od = d.path().join("od.csv");
        let fv = d.path().join("fv.csv");
        std::fs::write(&od, "Image No,X- Coordinate,Y - Coordinate,,\nIDRiD_01,10,20,,\nIDRiD_02,11,21,,\n,,,,\n").unwrap();
        std::fs::write(&fv, "Image No,X- Coordinate,Y - Coordinate\nIDRiD_01,30,25\n").unwrap();
        let out = load_dataset(d.path(), &CsvSource::Split { optic_disc: od, fovea: fv }, &BoxPriors::default()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.unmatched, vec!["IDRiD_02".to_string()]);
        assert_eq!(out.records[0].annotation.fovea.unwrap().x, 30.0);
        assert!(out.records[1].annotation.fovea.is_none());
    }

    #[test]
    fn bad_rows_missing_images_and_out_of_bounds() {
        let d = img_dir(&["a", "b"], 32, 32);
        let csv = d.path().join("c.csv");
        std::fs::write(&csv, "image,od_x,od_y,fov_x,fov_y\na,1,2,3,4\nb,1,x,3,4\n").unwrap();
        let e = load_dataset(d.path(), &CsvSource::Unified(csv.clone()), &BoxPriors::default()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e:?}");

        std::fs::write(&csv, "image,od_x,od_y,fov_x,fov_y\na,1,2,3,4\nb,100,2,3,4\nc,1,2,3,4\n").unwrap();
        let out = load_dataset(d.path(), &CsvSource::Unified(csv), &BoxPriors::default()).unwrap();
        assert_eq!(out.records.len(), 1);
        let ids: Vec<_> = out.rejected.iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, ["b", "c"]);
        assert!(out.rejected[0].reason.contains("outside"));
    }

    #[test]
    fn missing_header_is_an_error() {
        let d = tempfile::tempdir().unwrap();
        let csv = d.path().join("c.csv");
        std::fs::write(&csv, "a,1,2,3,4\n").unwrap();
        assert!(matches!(load_dataset(d.path(), &CsvSource::Unified(csv), &BoxPriors::default()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn split_counts() {
        assert_eq!(train_count(80, 0.8), 64);
        assert_eq!(train_count(516, 0.8), 413);
        assert_eq!(train_count(3, 1.0), 3);
    }
}
