use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

/// Details of the clustering run that produced an assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ClusterMeta {
    pub method: String,
    pub restarts: usize,
    pub best_restart: usize,
    pub inertia: f64,
    /// Number of coordinates kept by the random projection, if one was used.
    pub projected_dim: Option<usize>,
    pub repaired_empty: usize,
}

/// Task to group mapping. Groups are numbered `0..n_groups` and all non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    /// `groups[task_id]` is the task's group.
    pub groups: Vec<usize>,
    pub n_groups: usize,
    pub seed: u64,
    #[serde(default)]
    pub meta: ClusterMeta,
}

impl GroupAssignment {
    pub fn new(groups: Vec<usize>, n_groups: usize, seed: u64) -> Result<Self> {
        let a = Self {
            groups,
            n_groups,
            seed,
            meta: ClusterMeta::default(),
        };
        a.validate()?;
        Ok(a)
    }

    /// Every task in its own group.
    pub fn singletons(n: usize) -> Self {
        Self {
            groups: (0..n).collect(),
            n_groups: n,
            seed: 0,
            meta: ClusterMeta {
                method: "identity".into(),
                ..ClusterMeta::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 {
            return Err(Error::config("group count must be positive"));
        }
        let mut seen = vec![false; self.n_groups];
        for (t, &g) in self.groups.iter().enumerate() {
            if g >= self.n_groups {
                return Err(Error::config(format!(
                    "task {t} assigned to group {g} of {}",
                    self.n_groups
                )));
            }
            seen[g] = true;
        }
        if let Some(empty) = seen.iter().position(|&s| !s) {
            return Err(Error::config(format!("group {empty} has no tasks")));
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.groups.len()
    }

    pub fn group_of(&self, task: usize) -> usize {
        self.groups[task]
    }

    pub fn members(&self, j: usize) -> Result<Vec<usize>> {
        let m: Vec<usize> = (0..self.groups.len()).filter(|&t| self.groups[t] == j).collect();
        if m.is_empty() {
            return Err(Error::config(format!("group {j} has no tasks")));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fsutil::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_string(path)?;
        let a: Self = serde_json::from_str(&text)
            .map_err(|e| Error::data_at(path, None, format!("malformed group assignment: {e}")))?;
        a.validate()
            .map_err(|e| Error::data_at(path, None, e.to_string()))?;
        Ok(a)
    }
}
