//! On-disk formats: the binary FEAT feature matrix and the text model store.

mod feat;
mod store;

pub use feat::{decode_feat, encode_feat, read_feat, write_feat, FeatFile, FEAT_HEADER_LEN, FEAT_MAGIC, FEAT_VERSION};
pub use store::{ModelStore, Provenance, RecordSummary, StoreSummary, STORE_VERSION};

use std::path::Path;

use crate::error::Result;

/// Writes via a sibling temporary file so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
