//! Versioned text checkpoints of a [`ModelState`].
//!
//! ```text
//! etfcil-checkpoint 1
//! input_dim 16
//! width 16
//! head_dim 16
//! adapt 1
//! wiring parallel
//! head etf
//! etf_budget 3ff0000000000000
//! feature_budget 3ff0000000000000
//! seed 7
//! expands 2
//! classes 0 1 2 3 4 5
//! params 31
//! param base.block0.fc1.weight 1 2 16 16
//! 3fb2... (one hex IEEE-754 word per value)
//! ...
//! ```
//!
//! Values are stored as raw bit patterns, so a round trip is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use super::{ArchConfig, HeadKind, ModelState, Wiring};
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "etfcil-checkpoint";
const VERSION: u32 = 1;

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unhex(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Checkpoint(format!("bad value word `{s}`")))
}

pub fn write_checkpoint(model: &ModelState) -> String {
    let a = model.arch();
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC} {VERSION}");
    let _ = writeln!(out, "input_dim {}", a.input_dim);
    let _ = writeln!(out, "width {}", a.width);
    let _ = writeln!(out, "head_dim {}", a.head_dim);
    let _ = writeln!(out, "adapt {}", a.adapt as u8);
    let _ = writeln!(out, "wiring {}", a.wiring);
    let _ = writeln!(out, "head {}", a.head);
    let _ = writeln!(out, "etf_budget {}", hex(a.etf_budget));
    let _ = writeln!(out, "feature_budget {}", hex(a.feature_budget));
    let _ = writeln!(out, "seed {}", a.seed);
    let _ = writeln!(out, "expands {}", model.num_expands());
    let classes: Vec<String> = model.head().class_ids().iter().map(|c| c.to_string()).collect();
    let _ = writeln!(out, "classes {}", classes.join(" "));
    let _ = writeln!(out, "params {}", model.store.len());
    for (_, p) in model.store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(
            out,
            "param {} {} {} {}",
            p.name,
            p.frozen as u8,
            p.value.shape().len(),
            dims.join(" ")
        );
        let words: Vec<String> = p.value.data().iter().map(|v| hex(*v)).collect();
        let _ = writeln!(out, "{}", words.join(" "));
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::Checkpoint("unexpected end of checkpoint".into()))
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let (n, line) = self.next()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' ').or(if rest.is_empty() { Some("") } else { None }))
            .ok_or_else(|| Error::Checkpoint(format!("line {n}: expected `{key}`")))
    }
}

fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Checkpoint(format!("invalid {what}: `{s}`")))
}

pub fn read_checkpoint(text: &str) -> Result<ModelState> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let version = lines.field(CHECKPOINT_MAGIC)?;
    if num::<u32>(version, "version")? != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let input_dim = num(lines.field("input_dim")?, "input_dim")?;
    let width = num(lines.field("width")?, "width")?;
    let head_dim = num(lines.field("head_dim")?, "head_dim")?;
    let adapt = num::<u8>(lines.field("adapt")?, "adapt")? != 0;
    let wiring = match lines.field("wiring")? {
        "parallel" => Wiring::Parallel,
        "serial" => Wiring::Serial,
        other => return Err(Error::Checkpoint(format!("unknown wiring `{other}`"))),
    };
    let head = match lines.field("head")? {
        "etf" => HeadKind::Etf,
        "fc" => HeadKind::Fc,
        other => return Err(Error::Checkpoint(format!("unknown head `{other}`"))),
    };
    let etf_budget = unhex(lines.field("etf_budget")?)?;
    let feature_budget = unhex(lines.field("feature_budget")?)?;
    let seed = num(lines.field("seed")?, "seed")?;
    let expands: usize = num(lines.field("expands")?, "expands")?;
    let classes = lines
        .field("classes")?
        .split_whitespace()
        .map(|c| num::<usize>(c, "class id"))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = num(lines.field("params")?, "params")?;

    let mut store = ParamStore::new();
    for _ in 0..count {
        let header = lines.field("param")?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() < 3 {
            return Err(Error::Checkpoint(format!("malformed param header `{header}`")));
        }
        let name = parts[0];
        let frozen = num::<u8>(parts[1], "frozen flag")? != 0;
        let rank: usize = num(parts[2], "rank")?;
        if parts.len() != 3 + rank {
            return Err(Error::Checkpoint(format!("param `{name}` declares rank {rank}")));
        }
        let shape = parts[3..].iter().map(|d| num::<usize>(d, "extent")).collect::<Result<Vec<_>>>()?;
        let (_, body) = lines.next()?;
        let data = body.split_whitespace().map(unhex).collect::<Result<Vec<_>>>()?;
        let id = store.push(name, Tensor::new(shape, data)?);
        store.set_frozen(id, frozen);
    }
    let arch = ArchConfig {
        input_dim,
        width,
        head_dim,
        adapt,
        wiring,
        head,
        etf_budget,
        feature_budget,
        seed,
    };
    ModelState::from_parts(store, arch, expands, classes)
}

impl ModelState {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, write_checkpoint(self)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        read_checkpoint(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::tests::arch;

    #[test]
    fn round_trip_is_bit_exact() {
        for (wiring, head, adapt) in [
            (Wiring::Parallel, HeadKind::Etf, true),
            (Wiring::Serial, HeadKind::Fc, false),
        ] {
            let mut m = ModelState::new(arch(wiring, head, adapt), &[4, 1]).unwrap();
            m.add_expand_layer().unwrap();
            m.add_expand_layer().unwrap();
            m.grow_head(&[0, 2]).unwrap();
            let id = m.base_params()[1];
            m.store.get_mut(id).value.data_mut()[0] = -0.1 + 1e-17;
            let text = write_checkpoint(&m);
            let back = read_checkpoint(&text).unwrap();
            assert_eq!(back, m);
            assert_eq!(write_checkpoint(&back), text);
        }
    }

    #[test]
    fn rejects_corrupt_input() {
        let m = ModelState::new(arch(Wiring::Parallel, HeadKind::Etf, true), &[0, 1]).unwrap();
        let text = write_checkpoint(&m);
        assert!(read_checkpoint(&text.replace("etfcil-checkpoint 1", "etfcil-checkpoint 9")).is_err());
        assert!(read_checkpoint(&text.replace("expands 0", "expands 1")).is_err());
        assert!(read_checkpoint(&text[..text.len() / 2]).is_err());
    }
}
