use std::fs;
use std::path::Path;

use super::{SampleSource, SegSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "ibnseg-dataset v1";

/// Samples held in memory, e.g. loaded from an exported directory.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    samples: Vec<SegSample>,
    classes: usize,
}

impl SampleSet {
    /// Render every sample of `source` once and keep it.
    pub fn collect<S: SampleSource + ?Sized>(source: &S) -> Result<Self> {
        Ok(SampleSet {
            samples: (0..source.len()).map(|i| source.sample(i)).collect::<Result<_>>()?,
            classes: source.classes(),
        })
    }

    pub fn samples(&self) -> &[SegSample] {
        &self.samples
    }
}

impl SampleSource for SampleSet {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sample(&self, index: usize) -> Result<SegSample> {
        self.samples
            .get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("sample {index} out of range")))
    }

    fn classes(&self) -> usize {
        self.classes
    }
}

fn sample_dir(root: &Path, i: usize) -> std::path::PathBuf {
    root.join(format!("sample_{i:06}"))
}

/// One directory per sample holding `imageA`, `imageB` and `mask` tensor
/// files, plus a `manifest.txt` listing ids and seeds. Pixel values are
/// stored as 32-bit floats.
pub fn export_dataset<S: SampleSource + ?Sized>(source: &S, dir: &Path) -> Result<()> {
    let io = |what: &Path, e| Error::io(format!("writing {}", what.display()), e);
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut manifest = format!("{MAGIC}\nsamples {}\nclasses {}\n", source.len(), source.classes());
    for i in 0..source.len() {
        let s = source.sample(i)?;
        let sub = sample_dir(dir, i);
        fs::create_dir_all(&sub).map_err(|e| io(&sub, e))?;
        s.image_a.save(&sub.join("imageA"))?;
        s.image_b.save(&sub.join("imageB"))?;
        s.mask.save(&sub.join("mask"))?;
        manifest.push_str(&format!("sample {i} {} {}\n", s.id, s.seed));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| io(&path, e))
}

pub fn import_dataset(dir: &Path) -> Result<SampleSet> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |line: &str| Error::Format(format!("bad dataset manifest line `{line}`"));
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Format(format!("{} is not a dataset manifest", path.display())));
    }
    let mut count = None;
    let mut classes = None;
    let mut samples = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split_ascii_whitespace().collect();
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad(line));
        match f.as_slice() {
            ["samples", n] => count = Some(num(n)? as usize),
            ["classes", m] => classes = Some(num(m)? as usize),
            ["sample", i, id, seed] => {
                let i = num(i)? as usize;
                if i != samples.len() {
                    return Err(bad(line));
                }
                let sub = sample_dir(dir, i);
                let sample = SegSample {
                    id: num(id)?,
                    seed: num(seed)?,
                    image_a: Tensor::load(&sub.join("imageA"))?,
                    image_b: Tensor::load(&sub.join("imageB"))?,
                    mask: Tensor::load(&sub.join("mask"))?,
                };
                check_sample(&sample, i)?;
                samples.push(sample);
            }
            _ => return Err(bad(line)),
        }
    }
    let classes = classes.ok_or_else(|| Error::Format("dataset manifest lacks `classes`".into()))?;
    if count != Some(samples.len()) || samples.is_empty() {
        return Err(Error::Format(format!(
            "dataset manifest announces {count:?} samples but lists {}",
            samples.len()
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.mask.shape()[0] != classes) {
        return Err(Error::Format(format!("sample {} has the wrong class count", s.id)));
    }
    Ok(SampleSet { samples, classes })
}

fn check_sample(s: &SegSample, i: usize) -> Result<()> {
    let ok = s.image_a.rank() == 3
        && s.image_b.rank() == 3
        && s.mask.rank() == 3
        && s.image_a.shape()[0] == 3
        && s.image_b.shape()[0] == 1
        && s.image_a.shape()[1..] == s.image_b.shape()[1..]
        && s.image_a.shape()[1..] == s.mask.shape()[1..];
    if !ok {
        return Err(Error::Format(format!("sample {i} has inconsistent tensor shapes")));
    }
    Ok(())
}
