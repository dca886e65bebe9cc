use super::output::sha256_hex;
use crate::spectral::{find_h_star, GridParams, ModelDocument, SpectralError, SpectralModel};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Bracketing tolerance on `h*` for every model the driver builds.
pub const H_STAR_TOL: f64 = 1e-12;
const CACHE_FORMAT: &str = "gfftree-model-cache/1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Built,
    /// A cache file existed but could not be used.
    Rebuilt(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    format: String,
    key: String,
    fingerprint: String,
    model: ModelDocument,
}

/// SHA-256 of the compact JSON form of the model document.
pub fn model_fingerprint(doc: &ModelDocument) -> String {
    sha256_hex(&serde_json::to_vec(doc).expect("model documents serialize"))
}

/// Content key of the model determined by `(d, grid parameters)`.
pub fn cache_key(d: u32, params: &GridParams) -> String {
    let spec = format!(
        "{CACHE_FORMAT} d={d} n_points={} tail_tol={:e} h_tol={H_STAR_TOL:e}",
        params.n_points, params.tail_tol
    );
    sha256_hex(spec.as_bytes())
}

pub fn cache_path(dir: &Path, d: u32, params: &GridParams) -> PathBuf {
    dir.join(format!("model-{}.json", &cache_key(d, params)[..16]))
}

/// Loads the model for `(d, params)` from `dir`, solving and storing it on a
/// miss. Unreadable, corrupt or mismatched entries are rebuilt with a warning.
pub fn load_or_build_model(
    d: u32,
    params: &GridParams,
    dir: &Path,
) -> Result<(SpectralModel, CacheStatus), SpectralError> {
    let path = cache_path(dir, d, params);
    let key = cache_key(d, params);
    let status = match std::fs::read(&path) {
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => CacheStatus::Built,
        Err(e) => CacheStatus::Rebuilt(format!("unreadable: {e}")),
        Ok(bytes) => match load_entry(&bytes, &key, d, params) {
            Ok(model) => return Ok((model, CacheStatus::Hit)),
            Err(reason) => CacheStatus::Rebuilt(reason),
        },
    };
    if let CacheStatus::Rebuilt(reason) = &status {
        log::warn!("model cache {} rejected ({reason}); rebuilding", path.display());
    }
    let model = find_h_star(d, params, H_STAR_TOL)?;
    let doc = model.to_document();
    let entry = CacheEntry {
        format: CACHE_FORMAT.to_string(),
        key,
        fingerprint: model_fingerprint(&doc),
        model: doc,
    };
    let stored = std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(&path, serde_json::to_vec(&entry).expect("cache entries serialize")));
    if let Err(e) = stored {
        log::warn!("could not write model cache {}: {e}", path.display());
    }
    Ok((model, status))
}

fn load_entry(bytes: &[u8], key: &str, d: u32, params: &GridParams) -> Result<SpectralModel, String> {
    let entry: CacheEntry = serde_json::from_slice(bytes).map_err(|e| format!("corrupt: {e}"))?;
    if entry.format != CACHE_FORMAT || entry.key != key {
        return Err("key mismatch".into());
    }
    let doc = &entry.model;
    if doc.d != d || doc.n_points != params.n_points || doc.tail_tol != params.tail_tol {
        return Err("parameter mismatch".into());
    }
    if model_fingerprint(doc) != entry.fingerprint {
        return Err("fingerprint mismatch".into());
    }
    SpectralModel::from_document(doc).map_err(|e| format!("invalid model: {e}"))
}
