//! Directory layout: `images/NNNNNN.ppm`, `labels/NNNNNN.pgm`,
//! `manifest.txt` (one basename per line) and `meta.txt` (`classes`,
//! `ignore_id`, `canvas`).

use std::fs;
use std::path::Path;

use super::netpbm::{read_pgm, read_ppm, write_pgm, write_ppm, Gray};
use super::synth::SegSample;
use crate::eal::LabelMap;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SegSample>,
    pub num_classes: usize,
    pub ignore_id: u8,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples `range` as a new dataset with the same metadata.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            samples: self.samples[range].to_vec(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            samples: Vec::new(),
            num_classes: self.num_classes,
            ignore_id: self.ignore_id,
            height: self.height,
            width: self.width,
        }
    }
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut manifest = String::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let name = format!("{i:06}");
        write_ppm(&dir.join("images").join(format!("{name}.ppm")), &s.image)?;
        write_pgm(
            &dir.join("labels").join(format!("{name}.pgm")),
            &Gray {
                width: s.labels.width(),
                height: s.labels.height(),
                pixels: s.labels.ids().to_vec(),
            },
        )?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    fs::write(
        dir.join("meta.txt"),
        format!(
            "classes={}\nignore_id={}\ncanvas={}x{}\n",
            ds.num_classes, ds.ignore_id, ds.height, ds.width
        ),
    )?;
    Ok(())
}

fn parse_meta(text: &str) -> Result<(usize, u8, usize, usize)> {
    let (mut classes, mut ignore, mut canvas) = (None, None, None);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Dataset(format!("meta.txt: malformed line '{line}'")))?;
        let bad = || Error::Dataset(format!("meta.txt: bad value for {k}: '{v}'"));
        match k.trim() {
            "classes" => classes = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            "ignore_id" => ignore = Some(v.trim().parse::<u8>().map_err(|_| bad())?),
            "canvas" => {
                let (h, w) = v.trim().split_once('x').ok_or_else(bad)?;
                canvas = Some((
                    h.parse::<usize>().map_err(|_| bad())?,
                    w.parse::<usize>().map_err(|_| bad())?,
                ));
            }
            other => return Err(Error::Dataset(format!("meta.txt: unknown key '{other}'"))),
        }
    }
    let missing = |k: &str| Error::Dataset(format!("meta.txt: missing key '{k}'"));
    let (h, w) = canvas.ok_or_else(|| missing("canvas"))?;
    Ok((
        classes.ok_or_else(|| missing("classes"))?,
        ignore.ok_or_else(|| missing("ignore_id"))?,
        h,
        w,
    ))
}

/// Loads and validates every sample listed in the manifest.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let read = |name: &str| {
        fs::read_to_string(dir.join(name))
            .map_err(|e| Error::Dataset(format!("{}: {e}", dir.join(name).display())))
    };
    let (num_classes, ignore_id, height, width) = parse_meta(&read("meta.txt")?)?;
    if num_classes < 2 || (ignore_id as usize) < num_classes {
        return Err(Error::Dataset(format!(
            "meta.txt: need at least 2 classes and an ignore id outside them (classes={num_classes}, ignore_id={ignore_id})"
        )));
    }
    let mut samples = Vec::new();
    for name in read("manifest.txt")?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
    {
        let img_path = dir.join("images").join(format!("{name}.ppm"));
        let lbl_path = dir.join("labels").join(format!("{name}.pgm"));
        let image = read_ppm(&img_path)?;
        let g = read_pgm(&lbl_path)?;
        if (g.height, g.width) != (image.shape().h(), image.shape().w()) {
            return Err(Error::Dataset(format!(
                "{name}: label {}×{} vs image {}×{}",
                g.height,
                g.width,
                image.shape().h(),
                image.shape().w()
            )));
        }
        let labels = LabelMap::new(g.height, g.width, g.pixels, ignore_id)?;
        labels
            .validate(num_classes)
            .map_err(|e| Error::Dataset(format!("{}: {e}", lbl_path.display())))?;
        samples.push(SegSample { image, labels });
    }
    Ok(Dataset {
        samples,
        num_classes,
        ignore_id,
        height,
        width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SceneConfig};

    #[test]
    fn round_trip_and_label_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        let ds = Dataset {
            samples: generate(&cfg, 3).unwrap(),
            num_classes: 4,
            ignore_id: 255,
            height: 64,
            width: 64,
        };
        write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
        assert_eq!(
            fs::read_to_string(dir.path().join("manifest.txt")).unwrap(),
            "000000\n000001\n000002\n"
        );

        let bad = Gray {
            width: 64,
            height: 64,
            pixels: vec![9; 64 * 64],
        };
        write_pgm(&dir.path().join("labels/000001.pgm"), &bad).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(
            err.contains("000001.pgm") && err.contains("invalid label 9"),
            "{err}"
        );
    }
}
