use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable overriding the default cache directory.
pub const CACHE_ENV: &str = "BENCH_CACHE_DIR";

pub fn default_cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_ENV) {
        return PathBuf::from(dir);
    }
    if let Some(dir) = std::env::var_os("XDG_CACHE_HOME") {
        return PathBuf::from(dir).join("tabbench");
    }
    match std::env::var_os("HOME") {
        Some(home) => PathBuf::from(home).join(".cache").join("tabbench"),
        None => std::env::temp_dir().join("tabbench-cache"),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Downloads `url` into `<cache_dir>/<sha256(url)>/data.csv` unless a copy
/// whose content hash matches the recorded digest is already there.
pub fn fetch_dataset(url: &str, cache_dir: &Path) -> Result<PathBuf> {
    let dir = cache_dir.join(sha256_hex(url.as_bytes()));
    let data = dir.join("data.csv");
    let digest_file = dir.join("data.csv.sha256");
    if let (Ok(bytes), Ok(recorded)) = (fs::read(&data), fs::read_to_string(&digest_file)) {
        if sha256_hex(&bytes) == recorded.trim() {
            return Ok(data);
        }
    }
    let bytes = download(url)?;
    fs::create_dir_all(&dir)?;
    write_atomic(&data, &bytes)?;
    write_atomic(&digest_file, sha256_hex(&bytes).as_bytes())?;
    Ok(data)
}

fn download(url: &str) -> Result<Vec<u8>> {
    let fail = |message: String| Error::Fetch {
        url: url.to_string(),
        message,
    };
    let mut response = ureq::get(url).call().map_err(|e| fail(e.to_string()))?;
    response
        .body_mut()
        .with_config()
        .limit(u64::MAX)
        .read_to_vec()
        .map_err(|e| fail(e.to_string()))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves `body` on a local port and counts requests.
    fn serve(body: &'static str) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let mut stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                while reader.read_line(&mut line).unwrap() > 2 {
                    line.clear();
                }
                counter.fetch_add(1, Ordering::SeqCst);
                write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/data.csv"), hits)
    }

    #[test]
    fn second_fetch_hits_cache() {
        let cache = tempfile::tempdir().unwrap();
        let (url, hits) = serve("x,y\n1,0\n");
        let a = fetch_dataset(&url, cache.path()).unwrap();
        let b = fetch_dataset(&url, cache.path()).unwrap();
        assert_eq!(a, b);
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        assert_eq!(fs::read_to_string(&a).unwrap(), "x,y\n1,0\n");
        assert!(a.starts_with(cache.path().join(sha256_hex(url.as_bytes()))));
    }

    #[test]
    fn corrupted_cache_is_refetched() {
        let cache = tempfile::tempdir().unwrap();
        let (url, hits) = serve("x,y\n1,0\n");
        let path = fetch_dataset(&url, cache.path()).unwrap();
        fs::write(&path, "garbage").unwrap();
        fetch_dataset(&url, cache.path()).unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 2);
        assert_eq!(fs::read_to_string(&path).unwrap(), "x,y\n1,0\n");
    }

    #[test]
    fn unreachable_with_empty_cache_errors() {
        let cache = tempfile::tempdir().unwrap();
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/missing.csv", listener.local_addr().unwrap());
        drop(listener);
        assert!(matches!(
            fetch_dataset(&url, cache.path()),
            Err(Error::Fetch { .. })
        ));
    }
}
