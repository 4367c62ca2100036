//! Feature extraction with a content-addressed disk cache.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::audio::{load_wav, resample, CANONICAL_RATE};
use crate::features::{log_mel, read_spectrogram, write_spectrogram, MelSpectrogram};

use super::{DatasetIndex, PipelineError};

/// Log-mel spectrograms for every entry of an index, computed once and
/// optionally cached on disk keyed by the audio file's content hash.
pub struct FeatureStore {
    specs: HashMap<String, MelSpectrogram>,
}

impl FeatureStore {
    pub fn build(index: &DatasetIndex, cache_dir: Option<&Path>) -> Result<FeatureStore, PipelineError> {
        if let Some(dir) = cache_dir {
            std::fs::create_dir_all(dir)?;
        }
        let computed: Vec<(String, MelSpectrogram)> = index
            .entries
            .par_iter()
            .map(|entry| -> Result<_, PipelineError> {
                let mut spec = match cache_dir {
                    Some(dir) => {
                        let bytes = std::fs::read(&entry.path)?;
                        let key = hex(&Sha256::digest(&bytes));
                        let cached = dir.join(format!("{key}.mel"));
                        match read_spectrogram(&cached) {
                            Ok(spec) => spec,
                            Err(_) => {
                                let spec = extract(&entry.path)?;
                                write_spectrogram(&spec, &cached)?;
                                spec
                            }
                        }
                    }
                    None => extract(&entry.path)?,
                };
                // Identity comes from the entry, not the cache file: two
                // entries may share identical audio content.
                spec.source_id = entry.source_id.clone();
                spec.class_label = Some(entry.class);
                Ok((entry.source_id.clone(), spec))
            })
            .collect::<Result<_, _>>()?;
        Ok(FeatureStore {
            specs: computed.into_iter().collect(),
        })
    }

    pub fn get(&self, source_id: &str) -> Option<&MelSpectrogram> {
        self.specs.get(source_id)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

fn extract(path: &Path) -> Result<MelSpectrogram, PipelineError> {
    let clip = load_wav(path)?;
    let clip = resample(&clip, CANONICAL_RATE)?;
    Ok(log_mel(&clip)?)
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth_dataset;

    #[test]
    fn caches_are_hit_on_the_second_build() {
        let data = tempfile::tempdir().unwrap();
        let cache = tempfile::tempdir().unwrap();
        let index = synth_dataset(2, 2, 8, data.path()).unwrap();

        let s1 = FeatureStore::build(&index, Some(cache.path())).unwrap();
        let files_after_first: Vec<_> = std::fs::read_dir(cache.path()).unwrap().collect();
        assert_eq!(files_after_first.len(), 4);

        let s2 = FeatureStore::build(&index, Some(cache.path())).unwrap();
        assert_eq!(s1.len(), s2.len());
        for e in &index.entries {
            let a = s1.get(&e.source_id).unwrap();
            let b = s2.get(&e.source_id).unwrap();
            assert_eq!(a.values, b.values);
            assert_eq!(a.class_label, Some(e.class));
        }
    }

    #[test]
    fn works_without_a_cache_dir() {
        let data = tempfile::tempdir().unwrap();
        let index = synth_dataset(1, 2, 9, data.path()).unwrap();
        let store = FeatureStore::build(&index, None).unwrap();
        assert_eq!(store.len(), 2);
        let spec = store.get(&index.entries[0].source_id).unwrap();
        assert_eq!(spec.n_bands(), 128);
        assert_eq!(spec.n_frames(), 173);
    }
}
