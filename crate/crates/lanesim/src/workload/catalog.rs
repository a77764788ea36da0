//! Built-in workload catalog: per-(model, batch) memory footprints and solo
//! iteration durations, embedded as a versioned JSON asset. Entries flagged
//! `approx` are estimates; the rest carry exactly quoted measurements.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CatalogEntry {
    pub name: String,
    /// Batch size as a label: usually a count ("25"), sometimes a size tag ("small").
    pub batch: String,
    pub peak_bytes: u64,
    pub average_bytes: u64,
    pub persistent_bytes: u64,
    pub solo_iteration_s: f64,
    pub approx: bool,
}

#[derive(Deserialize)]
struct CatalogFile {
    version: u32,
    #[serde(default)]
    #[allow(dead_code)]
    comment: String,
    entries: Vec<CatalogEntry>,
}

static CATALOG: OnceLock<CatalogFile> = OnceLock::new();

fn file() -> &'static CatalogFile {
    CATALOG.get_or_init(|| {
        let parsed: CatalogFile = serde_json::from_str(include_str!("../../assets/catalog.json"))
            .expect("embedded catalog must parse");
        for e in &parsed.entries {
            // persistent ≤ average ≤ peak must hold for every entry
            assert!(
                e.persistent_bytes <= e.average_bytes && e.average_bytes <= e.peak_bytes,
                "catalog entry {}_{} violates persistent ≤ average ≤ peak",
                e.name,
                e.batch
            );
        }
        parsed
    })
}

pub fn version() -> u32 {
    file().version
}

pub fn all() -> &'static [CatalogEntry] {
    &file().entries
}

pub fn lookup(name: &str, batch: &str) -> Result<&'static CatalogEntry> {
    all()
        .iter()
        .find(|e| e.name == name && e.batch == batch)
        .ok_or_else(|| SimError::CatalogMiss {
            name: name.to_string(),
            batch: batch.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::{GB, MB};

    #[test]
    fn anchor_values_exact() {
        let r152 = lookup("resnet152", "75").unwrap();
        assert_eq!(r152.peak_bytes, 13_800_000_000);
        assert_eq!(r152.persistent_bytes, 822_200_000);
        assert!(!r152.approx);

        assert_eq!(lookup("googlenet", "25").unwrap().persistent_bytes, 110_900_000);

        for batch in ["64", "128", "256"] {
            let vae = lookup("vae", batch).unwrap();
            assert_eq!(vae.peak_bytes, 35 * MB);
            assert_eq!(vae.average_bytes, 22 * MB);
        }
    }

    #[test]
    fn forty_five_entries_fifteen_models() {
        assert_eq!(all().len(), 45);
        let mut models: Vec<&str> = all().iter().map(|e| e.name.as_str()).collect();
        models.dedup();
        assert_eq!(models.len(), 15);
        for e in all() {
            assert!(e.peak_bytes <= 16 * GB, "{}_{} exceeds a 16 GB device", e.name, e.batch);
            assert!(e.solo_iteration_s > 0.0);
        }
    }

    #[test]
    fn unknown_key_is_named_in_error() {
        let err = lookup("resnet152", "99").unwrap_err();
        assert!(err.to_string().contains("resnet152_99"));
    }
}
