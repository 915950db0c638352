//! Stage graph and the run manifest that gates it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sha256_file, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prepare,
    TrainRationalizer,
    TrainGenerator,
    Generate,
    TrainSelector,
    Select,
    TrainInference,
    Evaluate,
    Probe,
    HumanEval,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Prepare,
        Stage::TrainRationalizer,
        Stage::TrainGenerator,
        Stage::Generate,
        Stage::TrainSelector,
        Stage::Select,
        Stage::TrainInference,
        Stage::Evaluate,
        Stage::Probe,
        Stage::HumanEval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::TrainRationalizer => "train_rationalizer",
            Stage::TrainGenerator => "train_generator",
            Stage::Generate => "generate",
            Stage::TrainSelector => "train_selector",
            Stage::Select => "select",
            Stage::TrainInference => "train_inference",
            Stage::Evaluate => "evaluate",
            Stage::Probe => "probe",
            Stage::HumanEval => "human_eval",
        }
    }

    /// Stages that must be complete before this one may run.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Prepare => &[],
            Stage::TrainRationalizer | Stage::TrainGenerator | Stage::TrainSelector => &[Stage::Prepare],
            Stage::Generate => &[Stage::TrainRationalizer, Stage::TrainGenerator],
            Stage::Select => &[Stage::TrainSelector, Stage::Generate],
            Stage::TrainInference => &[Stage::Select],
            Stage::Evaluate | Stage::Probe => &[Stage::TrainInference],
            Stage::HumanEval => &[Stage::Generate],
        }
    }

    /// Every stage that depends on this one, directly or not.
    pub fn downstream(self) -> Vec<Stage> {
        let mut out: Vec<Stage> = Vec::new();
        let mut frontier = vec![self];
        while let Some(s) = frontier.pop() {
            for &t in &Stage::ALL {
                if t.upstream().contains(&s) && !out.contains(&t) {
                    out.push(t);
                    frontier.push(t);
                }
            }
        }
        out.sort();
        out
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('-', "_");
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub complete: bool,
    /// Artifact path (relative to the cache dir when inside it) → sha256.
    pub artifacts: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub stages: BTreeMap<Stage, StageRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn path(cache_dir: &Path) -> PathBuf {
        cache_dir.join(MANIFEST_FILE)
    }

    pub fn load(cache_dir: &Path) -> Result<Self> {
        let path = Self::path(cache_dir);
        if !path.exists() {
            return Ok(Self::default());
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, cache_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
        write_atomic(&Self::path(cache_dir), &serde_json::to_vec_pretty(self)?)
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stages.get(&stage).is_some_and(|r| r.complete)
    }

    /// Marks `stage` complete with digests of `artifacts` and drops every
    /// downstream record, since those were built from older inputs.
    pub fn record(
        &mut self,
        cache_dir: &Path,
        stage: Stage,
        artifacts: &[PathBuf],
        wall_clock_secs: f64,
        config: serde_json::Value,
    ) -> Result<()> {
        let mut digests = BTreeMap::new();
        for a in artifacts {
            digests.insert(artifact_key(cache_dir, a), sha256_file(a)?);
        }
        for d in stage.downstream() {
            self.stages.remove(&d);
        }
        self.stages.insert(
            stage,
            StageRecord {
                complete: true,
                artifacts: digests,
                wall_clock_secs,
            },
        );
        self.config = config;
        Ok(())
    }

    /// Artifacts whose file is missing or no longer matches its digest.
    pub fn stale_artifacts(&self, cache_dir: &Path, stage: Stage) -> Vec<String> {
        let Some(rec) = self.stages.get(&stage) else {
            return Vec::new();
        };
        rec.artifacts
            .iter()
            .filter(|(key, digest)| {
                let path = artifact_path(cache_dir, key);
                sha256_file(&path).map(|d| &d != *digest).unwrap_or(true)
            })
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Every recorded digest matches the file on disk.
    pub fn verify(&self, cache_dir: &Path) -> bool {
        self.stages.keys().all(|&s| self.stale_artifacts(cache_dir, s).is_empty())
    }

    /// Fails with the first upstream stage that is not complete or whose
    /// artifacts changed since it ran.
    pub fn check_upstream(&self, cache_dir: &Path, stage: Stage) -> Result<()> {
        for &up in stage.upstream() {
            if !self.is_complete(up) || !self.stale_artifacts(cache_dir, up).is_empty() {
                return Err(Error::MissingUpstream {
                    stage: stage.to_string(),
                    missing: up.to_string(),
                });
            }
        }
        Ok(())
    }
}

fn artifact_key(cache_dir: &Path, path: &Path) -> String {
    path.strip_prefix(cache_dir)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

fn artifact_path(cache_dir: &Path, key: &str) -> PathBuf {
    let p = Path::new(key);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        cache_dir.join(p)
    }
}
