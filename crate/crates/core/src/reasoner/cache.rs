//! Durable reasoning cache: append-only, one record per line.
//!
//! Records are keyed by prompt fingerprint with last-write-wins semantics,
//! so cache files from separate machines can be concatenated safely
//! (identical fingerprints imply content-identical records).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use super::{ReasoningRecord, ReasoningStatus};

pub struct ReasoningCache {
    path: Option<PathBuf>,
    by_fingerprint: BTreeMap<String, ReasoningRecord>,
    /// Latest successful record per meme, for split-wide lookups.
    by_meme: BTreeMap<String, ReasoningRecord>,
}

impl ReasoningCache {
    /// A cache with no backing file. Appends stay in memory.
    pub fn in_memory() -> Self {
        ReasoningCache {
            path: None,
            by_fingerprint: BTreeMap::new(),
            by_meme: BTreeMap::new(),
        }
    }

    /// Opens (or prepares to create) a cache file, loading existing records.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut cache = ReasoningCache {
            path: Some(path.to_path_buf()),
            by_fingerprint: BTreeMap::new(),
            by_meme: BTreeMap::new(),
        };
        if path.exists() {
            let file = std::fs::File::open(path)?;
            for line in std::io::BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: ReasoningRecord = serde_json::from_str(&line).map_err(|e| {
                    std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("bad cache line: {e}"),
                    )
                })?;
                cache.insert(record);
            }
        }
        Ok(cache)
    }

    fn insert(&mut self, record: ReasoningRecord) {
        if record.status == ReasoningStatus::Success {
            self.by_meme.insert(record.meme_id.clone(), record.clone());
        }
        self.by_fingerprint
            .insert(record.prompt_fingerprint.clone(), record);
    }

    /// Appends a record to the backing file (when present) and the maps.
    pub fn append(&mut self, record: ReasoningRecord) -> std::io::Result<()> {
        if let Some(path) = &self.path {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?;
            serde_json::to_writer(&mut file, &record)?;
            file.write_all(b"\n")?;
        }
        self.insert(record);
        Ok(())
    }

    /// Any record under this fingerprint, failed ones included.
    pub fn get(&self, fingerprint: &str) -> Option<&ReasoningRecord> {
        self.by_fingerprint.get(fingerprint)
    }

    /// Only a successful record satisfies a cache hit; failures are kept
    /// for forensics but do not short-circuit regeneration.
    pub fn success(&self, fingerprint: &str) -> Option<&ReasoningRecord> {
        self.by_fingerprint
            .get(fingerprint)
            .filter(|r| r.is_success())
    }

    pub fn contains(&self, fingerprint: &str) -> bool {
        self.by_fingerprint.contains_key(fingerprint)
    }

    /// Latest successful record for a meme, regardless of prompt version.
    pub fn success_for_meme(&self, meme_id: &str) -> Option<&ReasoningRecord> {
        self.by_meme.get(meme_id)
    }

    pub fn len(&self) -> usize {
        self.by_fingerprint.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_fingerprint.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &ReasoningRecord> {
        self.by_fingerprint.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(meme: &str, fp: &str, status: ReasoningStatus, created: u64) -> ReasoningRecord {
        ReasoningRecord {
            meme_id: meme.to_string(),
            status,
            cause_effect: "c".to_string(),
            figurative_understanding: "f".to_string(),
            mental_state: "m".to_string(),
            raw_output: "Cause-Effect\nc\nFigurative Understanding\nf\nMental State\nm"
                .to_string(),
            backend_id: "scripted".to_string(),
            prompt_fingerprint: fp.to_string(),
            created_at: created,
            text_only: false,
        }
    }

    #[test]
    fn roundtrip_through_file_preserves_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let mut cache = ReasoningCache::open(&path).unwrap();
        let rec = record("m1", "fp1", ReasoningStatus::Success, 7);
        cache.append(rec.clone()).unwrap();

        let reloaded = ReasoningCache::open(&path).unwrap();
        assert_eq!(reloaded.get("fp1"), Some(&rec));
        assert_eq!(reloaded.success_for_meme("m1"), Some(&rec));
    }

    #[test]
    fn duplicate_fingerprints_resolve_last_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let mut cache = ReasoningCache::open(&path).unwrap();
        cache
            .append(record("m1", "fp1", ReasoningStatus::Success, 1))
            .unwrap();
        cache
            .append(record("m1", "fp1", ReasoningStatus::Success, 2))
            .unwrap();

        let reloaded = ReasoningCache::open(&path).unwrap();
        assert_eq!(reloaded.len(), 1);
        assert_eq!(reloaded.get("fp1").unwrap().created_at, 2);
    }

    #[test]
    fn failed_records_are_stored_but_not_hits() {
        let mut cache = ReasoningCache::in_memory();
        cache
            .append(record("m1", "fp1", ReasoningStatus::Failed, 1))
            .unwrap();
        assert!(cache.get("fp1").is_some());
        assert!(cache.success("fp1").is_none());
        assert!(cache.success_for_meme("m1").is_none());
    }

    #[test]
    fn raw_output_with_newlines_survives_line_storage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let mut cache = ReasoningCache::open(&path).unwrap();
        let mut rec = record("m1", "fp1", ReasoningStatus::Success, 1);
        rec.raw_output = "line one\nline two\n\"quoted\"".to_string();
        cache.append(rec.clone()).unwrap();
        let reloaded = ReasoningCache::open(&path).unwrap();
        assert_eq!(reloaded.get("fp1").unwrap().raw_output, rec.raw_output);
        // Still one record per physical line.
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
    }
}
