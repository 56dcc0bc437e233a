//! Downloading and unpacking the public MovieLens archives.

use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use idcl_core::{Error, Result};

use crate::manifest::sha256_hex;

pub const ML_100K_URL: &str = "https://files.grouplens.org/datasets/movielens/ml-100k.zip";

/// Files of the archive that preparation needs.
const ML_100K_FILES: [&str; 3] = ["u.data", "u.item", "u.genre"];

pub fn download(url: &str) -> Result<Vec<u8>> {
    let response = ureq::get(url)
        .call()
        .map_err(|e| Error::Config(format!("download of {url} failed: {e}")))?;
    let mut bytes = Vec::new();
    response
        .into_body()
        .into_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Config(format!("download of {url} failed: {e}")))?;
    Ok(bytes)
}

/// Fails unless `bytes` hash to `expected` (hex, case-insensitive).
pub fn verify(bytes: &[u8], expected: &str) -> Result<String> {
    let got = sha256_hex(bytes);
    if !got.eq_ignore_ascii_case(expected.trim()) {
        return Err(Error::Config(format!("checksum mismatch: expected sha256 {expected}, got {got}")));
    }
    Ok(got)
}

/// Extracts the MovieLens 100k files from a zip archive into `dir`.
pub fn unpack_ml100k(archive: &[u8], dir: &Path) -> Result<Vec<PathBuf>> {
    let bad = |e: zip::result::ZipError| Error::Config(format!("not a readable zip archive: {e}"));
    let mut zip = zip::ZipArchive::new(Cursor::new(archive)).map_err(bad)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for name in ML_100K_FILES {
        let mut entry = zip.by_name(&format!("ml-100k/{name}")).map_err(bad)?;
        let mut bytes = Vec::new();
        entry
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Config(format!("cannot extract {name}: {e}")))?;
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn checksum_mismatch_is_an_error() {
        let sum = sha256_hex(b"abc");
        assert_eq!(verify(b"abc", &sum.to_uppercase()).unwrap(), sum);
        assert!(verify(b"abd", &sum).is_err());
    }

    #[test]
    fn unpacks_the_expected_members() {
        let mut buf = Cursor::new(Vec::new());
        {
            let mut zip = zip::ZipWriter::new(&mut buf);
            let opts = zip::write::SimpleFileOptions::default();
            for name in ML_100K_FILES {
                zip.start_file(format!("ml-100k/{name}"), opts).unwrap();
                zip.write_all(name.as_bytes()).unwrap();
            }
            zip.finish().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let files = unpack_ml100k(buf.get_ref(), dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        assert_eq!(std::fs::read_to_string(dir.path().join("u.item")).unwrap(), "u.item");
        assert!(unpack_ml100k(b"not a zip", dir.path()).is_err());
    }
}
