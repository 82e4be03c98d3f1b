use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

/// Header written as the first line (or `_meta` field) of every output.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_hash: String,
}

impl Meta {
    pub fn new(command: &str, config_hash: String) -> Self {
        Meta {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config_hash,
        }
    }
}

#[derive(Serialize)]
struct MetaLine<'a> {
    _meta: &'a Meta,
}

/// A file or stdout.
pub fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub struct JsonlWriter {
    out: Box<dyn Write>,
}

impl JsonlWriter {
    pub fn create(path: Option<&Path>, meta: &Meta) -> Result<Self> {
        let mut w = JsonlWriter { out: sink(path)? };
        w.write(&MetaLine { _meta: meta })?;
        Ok(w)
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Writes `value` as pretty JSON with a `_meta` field in front.
pub fn write_json<T: Serialize>(path: Option<&Path>, meta: &Meta, value: &T) -> Result<()> {
    #[derive(Serialize)]
    struct WithMeta<'a, T> {
        _meta: &'a Meta,
        #[serde(flatten)]
        value: &'a T,
    }
    let mut out = sink(path)?;
    serde_json::to_writer_pretty(&mut out, &WithMeta { _meta: meta, value })?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Maps in parallel on a pool of `threads` workers; results keep input order.
pub fn par_map<T, R, F>(threads: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}
