//! File formats, synthetic data, run configuration and the commands that
//! tie everything together.

pub mod commands;
pub mod config;
pub mod records;
pub mod synth;
pub mod tensor_file;

pub use config::RunConfig;
pub use records::{encode_example, load_examples, load_media, read_records, write_records};
pub use synth::{generate_corpus, write_corpus, SyntheticCorpusSpec};
pub use tensor_file::{read_tensor, write_tensor};

use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temporary file and renames it into place, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
