//! File formats: Middlebury `.flo`, the `TNSR` tensor container, binary
//! PGM heatmaps and CSV reports.

mod csv;
mod flo;
mod pgm;
mod tnsr;

pub use self::csv::{format_g, stats_csv, CsvTable};
pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC};
pub use pgm::{encode_pgm, heatmap_pgm};
pub use tnsr::{decode_tensor, encode_tensor, read_tensor, write_tensor, TNSR_MAGIC, TNSR_VERSION};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Little-endian reader over a byte slice that fails on truncation.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self {
            bytes,
            pos: 0,
            what,
        }
    }

    pub fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        match self.bytes.get(self.pos..self.pos + N) {
            Some(s) => {
                self.pos += N;
                Ok(s.try_into().expect("slice of length N"))
            }
            None => format_err(format!("{} truncated at byte {}", self.what, self.pos)),
        }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
