use std::io::{BufRead, Write};
use std::path::Path;

use serde::Serialize;

use crate::csvfmt::{fields, fmt_real, parse_int, parse_real};
use crate::error::{Error, Result};

const HEADER: &str = "probe,depth,divergence,floored_channels";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportMeta {
    pub model: String,
    pub modality_a: String,
    pub modality_b: String,
    pub samples_a: usize,
    pub samples_b: usize,
    pub floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivergenceRow {
    pub probe: String,
    pub depth: usize,
    pub divergence: f64,
    pub floored_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub meta: ReportMeta,
    pub rows: Vec<DivergenceRow>,
}

impl DivergenceReport {
    pub fn mean_divergence(&self) -> f64 {
        self.rows.iter().map(|r| r.divergence).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn row(&self, probe: &str) -> Option<&DivergenceRow> {
        self.rows.iter().find(|r| r.probe == probe)
    }

    /// Metadata as `# key: value` comment lines, then the table.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let m = &self.meta;
        let floored: usize = self.rows.iter().map(|r| r.floored_channels).sum();
        let mut out = String::new();
        out.push_str(&format!("# model: {}\n", m.model));
        out.push_str(&format!("# modality_a: {}\n", m.modality_a));
        out.push_str(&format!("# modality_b: {}\n", m.modality_b));
        out.push_str(&format!("# samples_a: {}\n", m.samples_a));
        out.push_str(&format!("# samples_b: {}\n", m.samples_b));
        out.push_str(&format!("# floor: {}\n", fmt_real(m.floor)));
        out.push_str(&format!("# floored_channels_total: {floored}\n"));
        out.push_str(HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.probe,
                r.depth,
                fmt_real(r.divergence),
                r.floored_channels
            ));
        }
        w.write_all(out.as_bytes())
            .map_err(|e| Error::io("writing divergence report", e))
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut meta = ReportMeta {
            model: String::new(),
            modality_a: String::new(),
            modality_b: String::new(),
            samples_a: 0,
            samples_b: 0,
            floor: 0.0,
        };
        let mut rows = Vec::new();
        let mut seen_header = false;
        for line in r.lines() {
            let line = line.map_err(|e| Error::io("reading divergence report", e))?;
            if let Some(comment) = line.strip_prefix("# ") {
                let (key, value) = comment
                    .split_once(": ")
                    .or_else(|| comment.strip_suffix(':').map(|k| (k, "")))
                    .ok_or_else(|| Error::Format(format!("bad metadata line `{line}`")))?;
                match key {
                    "model" => meta.model = value.to_string(),
                    "modality_a" => meta.modality_a = value.to_string(),
                    "modality_b" => meta.modality_b = value.to_string(),
                    "samples_a" => meta.samples_a = parse_int(value)?,
                    "samples_b" => meta.samples_b = parse_int(value)?,
                    "floor" => meta.floor = parse_real(value)?,
                    _ => {}
                }
                continue;
            }
            if !seen_header {
                if line != HEADER {
                    return Err(Error::Format(format!("expected header `{HEADER}`, got `{line}`")));
                }
                seen_header = true;
                continue;
            }
            let f = fields(&line, 4)?;
            rows.push(DivergenceRow {
                probe: f[0].to_string(),
                depth: parse_int(f[1])?,
                divergence: parse_real(f[2])?,
                floored_channels: parse_int(f[3])?,
            });
        }
        if !seen_header {
            return Err(Error::Format("divergence report has no header".into()));
        }
        Ok(DivergenceReport { meta, rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}
