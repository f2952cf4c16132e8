//! Dataset retrieval and the on-disk cache.
//!
//! Cache layout: `<cache_dir>/<source>/<file>`, storing decompressed IDX
//! files. A fetch downloads `<mirror>/<file>.gz` only for files missing from
//! the cache; present files are size-checked against their own header and
//! reused without touching the network.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

use super::idx::check_structure;
use super::{load_idx, Dataset, Source, Split};

/// Environment variable overriding the default cache directory.
pub const DATA_DIR_ENV: &str = "LETHE_DATA_DIR";

const FILES: [(&str, Split, bool); 4] = [
    ("train-images-idx3-ubyte", Split::Train, true),
    ("train-labels-idx1-ubyte", Split::Train, false),
    ("t10k-images-idx3-ubyte", Split::Test, true),
    ("t10k-labels-idx1-ubyte", Split::Test, false),
];

/// Download size cap; the largest expected file is ~47 MB decompressed.
const MAX_DOWNLOAD: u64 = 256 * 1024 * 1024;

/// Cache locations of one source's four IDX files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DatasetFiles {
    fn for_source(source: Source, cache_dir: &Path) -> Self {
        let dir = cache_dir.join(source.dir_name());
        DatasetFiles {
            train_images: dir.join(FILES[0].0),
            train_labels: dir.join(FILES[1].0),
            test_images: dir.join(FILES[2].0),
            test_labels: dir.join(FILES[3].0),
        }
    }

    pub fn all(&self) -> [&PathBuf; 4] {
        [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ]
    }
}

/// `$LETHE_DATA_DIR`, else `$HOME/.cache/lethe`, else `./lethe-cache`.
pub fn default_cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
        return PathBuf::from(dir);
    }
    match std::env::var_os("HOME") {
        Some(home) => Path::new(&home).join(".cache").join("lethe"),
        None => PathBuf::from("lethe-cache"),
    }
}

fn fetch_err(file: &str, mirror: &str, reason: impl Into<String>) -> Error {
    Error::Fetch {
        file: file.to_string(),
        mirror: mirror.to_string(),
        reason: reason.into(),
    }
}

/// Reads `<mirror>/<name>` where the mirror is an http(s) URL, a `file://`
/// URL, or a plain directory path.
fn read_from_mirror(mirror: &str, name: &str) -> Result<Vec<u8>> {
    let join = |base: &str| {
        if base.ends_with('/') {
            format!("{base}{name}")
        } else {
            format!("{base}/{name}")
        }
    };
    if let Some(rest) = mirror.strip_prefix("file://") {
        let path = Path::new(&join(rest)).to_path_buf();
        return std::fs::read(&path).map_err(|e| fetch_err(name, mirror, e.to_string()));
    }
    if mirror.starts_with("http://") || mirror.starts_with("https://") {
        let url = join(mirror);
        let mut response = ureq::get(&url)
            .call()
            .map_err(|e| fetch_err(name, mirror, e.to_string()))?;
        return response
            .body_mut()
            .with_config()
            .limit(MAX_DOWNLOAD)
            .read_to_vec()
            .map_err(|e| fetch_err(name, mirror, e.to_string()));
    }
    // Anything else is treated as a local directory.
    std::fs::read(join(mirror)).map_err(|e| fetch_err(name, mirror, e.to_string()))
}

fn gunzip(bytes: &[u8], name: &str, mirror: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| fetch_err(name, mirror, format!("gzip: {e}")))?;
    Ok(out)
}

/// Ensures all four files of `source` are cached under `cache_dir`, fetching
/// `<name>.gz` from the mirror for any that are missing. Files already in the
/// cache are verified against their own header and otherwise left alone; a
/// size mismatch is reported rather than silently re-fetched.
pub fn fetch_dataset(source: Source, mirror: &str, cache_dir: &Path) -> Result<DatasetFiles> {
    let files = DatasetFiles::for_source(source, cache_dir);
    for (&(name, _, _), dest) in FILES.iter().zip(files.all()) {
        if dest.exists() {
            let bytes = std::fs::read(dest).map_err(|e| Error::io(dest, e))?;
            check_structure(&bytes, dest)?;
            continue;
        }
        let compressed = read_from_mirror(mirror, &format!("{name}.gz"))?;
        let bytes = gunzip(&compressed, name, mirror)?;
        check_structure(&bytes, dest)?;
        let dir = dest.parent().expect("cache file has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = dest.with_extension("part");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, dest).map_err(|e| Error::io(dest, e))?;
    }
    Ok(files)
}

/// Loads both splits of a source from the cache, without any fetching.
pub fn load_cached(source: Source, cache_dir: &Path) -> Result<(Dataset, Dataset)> {
    let files = DatasetFiles::for_source(source, cache_dir);
    for path in files.all() {
        if !path.exists() {
            return Err(Error::Fetch {
                file: path.display().to_string(),
                mirror: source.default_mirror().to_string(),
                reason: "not cached; run `lethe fetch` or pass --data-dir".into(),
            });
        }
    }
    let train = load_idx(&files.train_images, &files.train_labels, source, Split::Train)?;
    let test = load_idx(&files.test_images, &files.test_labels, source, Split::Test)?;
    Ok((train, test))
}
