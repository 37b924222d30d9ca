//! Checkpoint directories.
//!
//! `manifest.txt` starts with `ibnseg-checkpoint v1`, then one
//! `config <key> <value>` line per architecture field and one
//! `param <name> <kind> <file>` line per store entry, in store order.
//! Each parameter lives in its own tensor v1 file; `probes.txt` lists the
//! probe registry, one name per line. Tensor payloads are 32-bit, so a
//! loaded model carries parameters rounded to `f32`.

use std::fs;
use std::path::Path;

use super::net::{NetConfig, ToyNet};
use super::params::{ParamKind, ParamStore};
use crate::csvfmt::{fmt_real, parse_real};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "ibnseg-checkpoint v1";

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn save(net: &ToyNet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let c = net.config();
    let widths: Vec<String> = c.widths.iter().map(|w| w.to_string()).collect();
    let mut manifest = format!(
        "{MAGIC}\nconfig policy {}\nconfig widths {}\nconfig num_classes {}\nconfig in_channels {}\n\
         config sn_branches {}\nconfig eps {}\nconfig momentum {}\n",
        c.policy,
        widths.join(","),
        c.num_classes,
        c.in_channels,
        c.sn_branches,
        fmt_real(c.norm.eps),
        fmt_real(c.norm.momentum),
    );
    for (i, e) in net.store().entries().iter().enumerate() {
        let file = format!("{i:03}_{}.tensor", e.name);
        let mut buf = Vec::new();
        e.tensor.write_v1(&mut buf)?;
        write_file(&dir.join(&file), buf)?;
        manifest.push_str(&format!("param {} {} {file}\n", e.name, e.kind.as_str()));
    }
    write_file(&dir.join("manifest.txt"), manifest)?;
    let mut probes = net.probe_names().join("\n");
    probes.push('\n');
    write_file(&dir.join("probes.txt"), probes)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn load(dir: &Path) -> Result<ToyNet> {
    let text = read(&dir.join("manifest.txt"))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Format(format!("{} is not a checkpoint", dir.display())));
    }
    let bad = |line: &str| Error::Format(format!("bad checkpoint manifest line `{line}`"));
    let mut config = NetConfig::default();
    let mut store = ParamStore::default();
    for line in lines {
        let f: Vec<&str> = line.split_ascii_whitespace().collect();
        match f.as_slice() {
            ["config", key, value] => match *key {
                "policy" => config.policy = value.parse().map_err(|_| bad(line))?,
                "widths" => {
                    config.widths = value
                        .split(',')
                        .map(|w| w.parse().map_err(|_| bad(line)))
                        .collect::<Result<_>>()?
                }
                "num_classes" => config.num_classes = value.parse().map_err(|_| bad(line))?,
                "in_channels" => config.in_channels = value.parse().map_err(|_| bad(line))?,
                "sn_branches" => config.sn_branches = value.parse().map_err(|_| bad(line))?,
                "eps" => config.norm.eps = parse_real(value)?,
                "momentum" => config.norm.momentum = parse_real(value)?,
                _ => return Err(bad(line)),
            },
            ["param", name, kind, file] => {
                let tensor = Tensor::load(&dir.join(file))?;
                store.insert(*name, ParamKind::parse(kind)?, tensor)?;
            }
            _ => return Err(bad(line)),
        }
    }
    let net = ToyNet::from_parts(config, store)?;
    let probes: Vec<String> = read(&dir.join("probes.txt"))?
        .lines()
        .map(str::to_string)
        .collect();
    if probes != net.probe_names() {
        return Err(Error::Format(format!(
            "checkpoint probe registry {probes:?} does not match the architecture's {:?}",
            net.probe_names()
        )));
    }
    Ok(net)
}
